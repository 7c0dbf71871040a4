"""
SGS - indoor scene generation learned from semantic-segmented depth images.

Semantic scene volumes are generated by a room-conditioned 3D generator and
trained against multi-view critics through a differentiable projection layer,
then turned into furnished scenes by shape retrieval.
"""

__version__ = "0.1.0"
__format_version__ = "1.0"

from sgs.config import PipelineConfig, preset
from sgs.core import GridSpec, LabelSpace, LabelVolume, RoomMaskVolume, RoomSpec, SemanticVolume
from sgs.projection import Camera, SemanticDepthImage, render_view
from sgs.reader import ContainerReader
from sgs.writer import ContainerWriter
