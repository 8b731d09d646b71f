"""Residual-stream attribution and scope-gated activation steering.

The heavy lifting lives in the compiled extension; this package simply
re-exports it.
"""

from mega._core import (  # noqa: F401
    EditCase,
    MegaError,
    Model,
    PcaProjector,
    ResidualTrace,
    SteeringPolicy,
    Tokenizer,
    TransportMap,
    augment_gaussian,
    build_ike_context,
    classify_outcome,
    contribution_profile,
    fit_policy,
    fit_transport,
    generate_toy,
    in_scope,
    load_cases_jsonl,
    make_doubt_prompts,
    pca_fit,
    sqrtm_psd,
    steer_transform,
    steered_decode,
    steered_forward,
    sym_eig,
)

__all__ = [
    "EditCase",
    "MegaError",
    "Model",
    "PcaProjector",
    "ResidualTrace",
    "SteeringPolicy",
    "Tokenizer",
    "TransportMap",
    "augment_gaussian",
    "build_ike_context",
    "classify_outcome",
    "contribution_profile",
    "fit_policy",
    "fit_transport",
    "generate_toy",
    "in_scope",
    "load_cases_jsonl",
    "make_doubt_prompts",
    "pca_fit",
    "sqrtm_psd",
    "steer_transform",
    "steered_decode",
    "steered_forward",
    "sym_eig",
]
