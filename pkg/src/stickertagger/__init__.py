"""Multi-tag sticker recognition toolkit."""

from .data import (
    CorpusStats,
    DataError,
    Dataset,
    StickerImage,
    TagVocabulary,
    load_manifest,
    split_dataset,
    tag_stats,
    write_manifest,
)
from .descriptions import (
    AttributeDescriptions,
    DescriptionCache,
    DescriptionError,
    HttpChatClient,
    StubChatClient,
    TextEncoder,
    build_prompt_turns,
    describe,
    describe_corpus,
    encode_descriptions,
)
from .losses import LossBreakdown, main_loss, penalty_loss, total_loss
from .metrics import (
    MetricsReport,
    aggregate,
    confusion_counts,
    load_probability_dump,
    report,
    save_probability_dump,
    select_predictions,
)
from .network import (
    ModelConfig,
    Prediction,
    PromptSequence,
    StickerTagger,
    TagDistribution,
    load_checkpoint,
    save_checkpoint,
    topc_select,
)
from .reattention import (
    MaskPlan,
    PatchEmbeddings,
    PatchGrid,
    RenewedAttention,
    apply_attention,
    corrupt,
    patch_similarity,
    patchify,
    reconstruct,
    renewed_attention,
    sample_mask_rounds,
    tokenize,
)
from .synthetic import GeneratorConfig, generate_synthetic
from .tagset import (
    ClusterResult,
    ElbowResult,
    KeywordCorpus,
    elbow_search,
    kmeans_cluster,
    majority_tag,
    tfidf_features,
)
from .training import AblationFlags, TrainConfig, TrainResult, apply_ablation, evaluate, train

__all__ = [
    "AblationFlags",
    "AttributeDescriptions",
    "ClusterResult",
    "CorpusStats",
    "DataError",
    "Dataset",
    "DescriptionCache",
    "DescriptionError",
    "ElbowResult",
    "GeneratorConfig",
    "HttpChatClient",
    "KeywordCorpus",
    "LossBreakdown",
    "MaskPlan",
    "MetricsReport",
    "ModelConfig",
    "PatchEmbeddings",
    "PatchGrid",
    "Prediction",
    "PromptSequence",
    "RenewedAttention",
    "StickerImage",
    "StickerTagger",
    "StubChatClient",
    "TagDistribution",
    "TagVocabulary",
    "TextEncoder",
    "TrainConfig",
    "TrainResult",
    "aggregate",
    "apply_ablation",
    "apply_attention",
    "build_prompt_turns",
    "confusion_counts",
    "corrupt",
    "describe",
    "describe_corpus",
    "elbow_search",
    "encode_descriptions",
    "evaluate",
    "generate_synthetic",
    "kmeans_cluster",
    "load_checkpoint",
    "load_manifest",
    "load_probability_dump",
    "main_loss",
    "majority_tag",
    "patch_similarity",
    "patchify",
    "penalty_loss",
    "reconstruct",
    "renewed_attention",
    "report",
    "sample_mask_rounds",
    "save_checkpoint",
    "save_probability_dump",
    "select_predictions",
    "split_dataset",
    "tag_stats",
    "tfidf_features",
    "tokenize",
    "topc_select",
    "total_loss",
    "train",
    "write_manifest",
]
