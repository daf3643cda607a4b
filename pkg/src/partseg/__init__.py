"""One-shot part segmentation by optimizing text embeddings of a frozen diffusion model."""
from .attention import aggregate_cross, aggregate_self, compose_was, stack_was
from .backbone import PromptEmbeddings, ToyBackbone, build_backbone
from .checkpoint import load_embeddings, save_embeddings
from .eval import EvalReport, emit_table, evaluate, iou
from .inference import SegmentationResult, segment, segment_patched
from .optimize import OptimizationConfig, optimize

__version__ = "0.1.0"
