"""Sparse-view cone-beam CT reconstruction baselines and anatomy-aware evaluation."""

from .diffusion import (LatentGrid, NoiseSchedule, add_noise, anatomy_loss, composite_loss,
                        concat_latents, noise_loss, pixel_loss, recover_z0)
from .geometry import (ConeBeamGeometry, ProjectionStack, backproject, fdk_filter,
                       forward_project, load_projections, save_projections)
from .metrics import (MetricParams, SurfacePointSet, cl_dice, dsc, extract_surface, nsd,
                      psnr, skeletonize, ssim)
from .phantom import (BranchingTree, Ellipsoid, PhantomSpec, PhantomStructure, Tube,
                      ablate_structure, default_spec, dilate_mask, load_spec, make_phantom,
                      save_spec, shift_mask)
from .recon import AsdPocsParams, ReconDiagnostics, SartParams, asd_pocs, fdk, sart
from .stats import (CategorySummary, MetricRecord, aggregate_category, mann_whitney_u,
                    median_iqr, pearson)
from .volume import (Grid3, LabelVolume, Mask3, Volume3, binary_mask, load_labels,
                     load_volume, save_labels, save_volume, window_normalize)

__version__ = "0.1.0"
