"""Frame records, patient splits, preprocessing, augmentation and the synthetic phantom."""
