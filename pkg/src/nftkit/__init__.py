"""nftkit: build, augment, and evaluate NFT-style image-text datasets."""

__version__ = "0.1.0"
