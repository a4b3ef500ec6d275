"""trigait: a three-branch gait recognizer (silhouette appearance, skeletal
temporal dynamics, fixed-view projected silhouettes) with a synthetic
procedural-gait dataset generator and open-set retrieval evaluation."""

__version__ = "0.1.0"
