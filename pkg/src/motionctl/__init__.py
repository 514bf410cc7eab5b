"""Motion-controlled toy video diffusion: attention-energy trajectory guidance and flow-derived intensity conditioning."""
