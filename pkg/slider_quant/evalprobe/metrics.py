import typing as t

import numpy as np
from scipy.special import log_softmax

import slider_quant.core.logging as logging
from slider_quant.core.errors import ContractError
from slider_quant.model.quantized import QuantizedModel
from slider_quant.model.tinymodel import Checkpoint, TinyLM

logger = logging.get_logger(__name__)

Evaluable = t.Union[TinyLM, Checkpoint, QuantizedModel]

DEFAULT_EVAL_BATCH = 8


def as_model(model: Evaluable) -> TinyLM:
    if isinstance(model, QuantizedModel):
        return model.to_model()
    if isinstance(model, Checkpoint):
        return TinyLM.from_checkpoint(model)
    return model


def eval_windows(tokens: np.ndarray, context: int) -> t.List[np.ndarray]:
    """Non-overlapping windows of ``context + 1`` tokens (stride ``context``); the tail may be shorter."""
    windows = []
    for start in range(0, len(tokens) - 1, context):
        window = tokens[start:start + context + 1]
        if len(window) >= 2:
            windows.append(window)
    return windows


def window_nll(model: TinyLM, windows: t.Sequence[np.ndarray]) -> t.List[float]:
    """Summed next-token negative log likelihood of each window, in float64."""
    by_length: t.Dict[int, t.List[int]] = {}
    for index, window in enumerate(windows):
        by_length.setdefault(len(window), []).append(index)
    results: t.Dict[int, float] = {}
    for length, indices in by_length.items():
        for start in range(0, len(indices), DEFAULT_EVAL_BATCH):
            chunk = indices[start:start + DEFAULT_EVAL_BATCH]
            batch = np.stack([windows[i] for i in chunk])
            logits = model.logits(batch[:, :-1]).astype(np.float64)
            log_probs = log_softmax(logits, axis=-1)
            targets = batch[:, 1:]
            picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
            for row, index in enumerate(chunk):
                results[index] = float(-picked[row].sum())
    return [results[index] for index in range(len(windows))]


def perplexity(model: Evaluable, tokens: np.ndarray, context: t.Optional[int] = None) -> float:
    """
    exp(mean next-token NLL) over non-overlapping context windows.

    :param tokens: Evaluation token ids
    :param context: Window length; defaults to the model's training context
    :raises ContractError: If fewer than two tokens are given
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or len(tokens) < 2:
        raise ContractError(f"perplexity needs a 1-d stream of at least 2 tokens, got shape {tokens.shape}")
    lm = as_model(model)
    context = context or lm.config.max_seq_len
    windows = eval_windows(tokens, context)
    totals = window_nll(lm, windows)
    # Fixed window order keeps the sum independent of batching.
    nll = 0.0
    for total in totals:
        nll += total
    count = sum(len(window) - 1 for window in windows)
    value = float(np.exp(nll / count))
    logger.debug(f"Perplexity over {count} tokens in {len(windows)} windows: {value:.4f}")
    return value
