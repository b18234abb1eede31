"""Unsupervised deformable registration and force-interpolated synthesis for ultrasound-like images."""

__version__ = "0.1.0"

from .errors import DomainError, FormatError, NumericalError, ShapeError, SonoregError, ValidationError
from .imagecore import BinaryMask, ForceFrame, FrameRecord, Image, load_image, load_mask, save_image, save_mask
from .losses import LossConfig, LossEval, loss_cyclic, loss_fa_cyclic, loss_grad, loss_us
from .metrics import endpoint_error, f_ssim, iou, ms_ssim, psnr, ssim
from .solver import RegistrationResult, SolverConfig, register, self_register
from .warp import DeformationField, field_lincomb, read_field, warp_image, warp_mask, write_field
