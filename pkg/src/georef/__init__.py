"""Category-level object pose refinement with geometric features."""
