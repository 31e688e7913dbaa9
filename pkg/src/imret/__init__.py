"""imret: kernel-based image retrieval and classification over sets of local feature vectors."""

__version__ = "0.1.0"
