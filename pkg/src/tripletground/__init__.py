"""Zero-shot referring-expression grounding via structural triplet matching."""

from .core import (
    BBox,
    EmbeddingVec,
    GroundingResult,
    ImageRef,
    Indicator,
    InstanceScores,
    StructuralSimilarity,
    TextEntity,
    TextTriplet,
    TripletEmbedding,
    VisualTriplet,
    center,
    cosine,
    iou,
    normalize,
    union_box,
)
from .gateway import (
    EmbeddingBackend,
    EmbeddingCache,
    HttpBackend,
    LabeledMockBackend,
    MockBackend,
    RegionRequest,
    embed_region,
    embed_texts,
    embed_visual_triplet,
    mock_backend,
)
from .matching import (
    MatchConfig,
    contrastive_loss,
    ground,
    group_triplet_datapoints,
    indicator,
    instance_scores,
    score_and_rank,
    select,
    similarity_matrix,
    structural_similarity,
)
from .pairing import (
    SpatialRule,
    build_visual_triplets,
    load_rules,
    size_prior_filter,
    spatial_filter,
)
from .parsing import (
    ParsedCaption,
    PromptTemplate,
    ReplayStore,
    build_prompt,
    compose_predicate_phrase,
    fill_degenerate,
    parse_caption,
    parse_completion,
)

__version__ = "0.1.0"
