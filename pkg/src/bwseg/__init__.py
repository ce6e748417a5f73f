"""Boundary-weighted placenta segmentation for BOLD MRI time series.

Modules
-------
volgrid     volume, label and series containers; preprocessing
fileio      native raw format and a NIfTI-1 subset
boundary    exact distance transforms, signed distance, boundary weight maps
losses      CE / Dice / focal losses with optional boundary weighting
augment     affine, elastic, flip and intensity augmentation
unet        3D U-Net, training loop, inference, checkpoints
metrics     Dice, HD95, ASSD, relative BOLD error
timeseries  consistency and hyperoxia response over a series
phantom     synthetic BOLD-like ground-truth data
cli         ``bwseg`` command line
"""

__version__ = "0.1.0"
