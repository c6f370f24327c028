"""Anchor-free license plate location and recognition, desk-scale numpy implementation."""
from .errors import DegenerateQuadError, PlatenetError
from .heatmap import Detection, DetectionMaps, DetectionTargets, PlateAnnotation, decode, encode_targets
from .losses import LossWeights, ctc_loss, detection_loss, total_loss
from .recognizer import Alphabet, RecognitionOutput, RuleSet, apply_rules, beam_search_decode, greedy_decode
from .rectify import rectify_batch, rectify_plate, solve_homography

__version__ = "0.1.0"
