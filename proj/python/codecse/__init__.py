from ._codecse import (
    CodecseError,
    analyze,
    apply_mask,
    default_config,
    degrade,
    enhance,
    generate_utterance,
    mask_count,
    quant_error_init,
    random_mask,
    rank_scores,
    reverse_schedule,
    rvq_decode,
    rvq_encode,
    si_sdr,
    synthesize,
    token_accuracy,
    train_rvq,
)

__all__ = [
    "CodecseError",
    "analyze",
    "apply_mask",
    "default_config",
    "degrade",
    "enhance",
    "generate_utterance",
    "mask_count",
    "quant_error_init",
    "random_mask",
    "rank_scores",
    "reverse_schedule",
    "rvq_decode",
    "rvq_encode",
    "si_sdr",
    "synthesize",
    "token_accuracy",
    "train_rvq",
]
