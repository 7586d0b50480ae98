"""Edge-conditioned anomaly synthesis and localization.

One generator architecture is trained in three progressive stages: a boot
stage that learns to combine edge structure with reference appearance, a
flare stage that turns forged anomaly edges into anomaly images with aligned
heatmaps, and a blaze stage that reuses the architecture as an anomaly
localizer.
"""

__version__ = "0.1.0"
