"""Text-conditioned protein sequence design over a dynamic fragment vocabulary."""

__version__ = "0.1.0"

from .corpus import (
    AMINO_ACIDS,
    FRAGMENT_TYPES,
    FragmentAnnotation,
    FragmentStep,
    ProteinRecord,
    ResidueStep,
    SegmentedSequence,
    compute_type_weights,
    detokenize,
    empirical_aa_distribution,
    load_corpus,
    segment,
    write_corpus,
)
from .model import (
    DynamicVocabulary,
    Model,
    ModelConfig,
    TrainingBatch,
    build_training_batch,
    total_loss,
)
from .checkpoint import fingerprint, load_checkpoint, save_checkpoint
from .training import TrainConfig, lr_at, train
from .retrieval import (
    EmbeddingIndex,
    ModelTextEmbedder,
    SupportingDocument,
    build_index,
    docs_from_corpus,
    embed_description,
    fragment_candidates,
    load_index,
    retrieve_topk,
    save_index,
)
from .generation import (
    UNCONDITIONAL_INSTRUCTION,
    GenerationParams,
    generate,
    generate_unconditional,
    top_k_filter_sample,
)
from .evaluation import (
    evaluate_designs,
    pairwise_identity,
    perplexity,
    random_empirical,
    random_plus,
    random_uniform,
    repetitiveness,
    retrieval_accuracy,
    sequence_diversity,
)

__all__ = [name for name in dir() if not name.startswith("_")]
