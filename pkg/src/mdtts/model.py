"""End-to-end synthesis model: encoder, durations, flow decoder, training.

One model object owns every trainable tensor under a stable name map, so
checkpoints, the optimizer, and routing-isolation checks all operate on the
same registry. Training runs one tape per utterance and accumulates
gradients over the batch before each optimizer step; all randomness flows
through generators seeded per run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import (
    DurationPredictorParams,
    alignment_scores,
    durations_from_log,
    length_regulate,
    mas,
    predict_durations,
)
from .autodiff import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    matmul,
    mul,
    reduce_mean,
    sub,
)
from .cfm import FieldNetParams, cfm_loss, euler_sample, field_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .dialect import FusionProjection, dialect_id, embed_dialect, fuse
from .dsp import griffin_lim, make_mel_filterbank, mel_project, pseudo_invert, stft
from .encoder import EncoderParams, encoder_forward
from .metrics import rtf as compute_rtf
from .text import Vocab, tokenize

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig", "TrainSample", "SynthesisModel", "train_model",
    "wav_to_logmel", "LOG_MEL_FLOOR",
]

LOG_MEL_FLOOR = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 220
    hidden_dim: int = 192
    heads: int = 2
    blocks: int = 2
    ffn_hidden: int = 192
    dialect_dim: int = 128
    n_mels: int = 80
    field_hidden: int = 192
    time_dim: int = 32
    duration_hidden: int = 64
    sigma_min: float = 1e-4
    sample_steps: int = 10
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    routed: bool = True
    duration_weight: float = 1.0
    prior_weight: float = 1.0

    def validate(self) -> None:
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError("sigma_min must be in [0, 1)")
        for name in ("vocab_size", "hidden_dim", "heads", "blocks",
                     "ffn_hidden", "dialect_dim", "n_mels", "field_hidden",
                     "duration_hidden", "sample_steps", "sample_rate",
                     "n_fft", "hop"):
            if getattr(self, name) < (0 if name == "blocks" else 1):
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class TrainSample:
    """One utterance: token ids, dialect id, log-mel target."""

    token_ids: tuple[int, ...]
    did: int
    mel: np.ndarray  # (F, n_mels)
    text: str = ""


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, in_dim: int, out_dim: int,
             rng: np.random.Generator) -> "Linear":
        scale = 1.0 / np.sqrt(in_dim)
        return cls(weight=Tensor(rng.normal(scale=scale,
                                            size=(in_dim, out_dim)),
                                 requires_grad=True),
                   bias=Tensor(np.zeros(out_dim), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class SynthesisModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = EncoderParams.init(
            config.vocab_size, config.hidden_dim, config.heads,
            config.ffn_hidden, config.blocks, config.dialect_dim, rng,
            routed=config.routed)
        self.duration = DurationPredictorParams.init(
            config.hidden_dim, config.duration_hidden, rng)
        self.align_proj = Linear.init(config.hidden_dim, config.n_mels, rng)
        self.dec_fusion = FusionProjection.init(
            config.dialect_dim, config.hidden_dim, rng)
        self.field = FieldNetParams.init(
            config.n_mels, config.hidden_dim, config.field_hidden,
            config.time_dim, rng)

    # ------------------------------------------------------------------
    # parameter registry

    def named_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"enc.embedding": self.encoder.embedding}
        for i, block in enumerate(self.encoder.blocks):
            prefix = f"enc.block{i}"
            for h in range(block.attn.heads):
                params[f"{prefix}.attn.wq{h}"] = block.attn.wq[h]
                params[f"{prefix}.attn.wk{h}"] = block.attn.wk[h]
                params[f"{prefix}.attn.wv{h}"] = block.attn.wv[h]
            params[f"{prefix}.attn.wo"] = block.attn.wo
            params[f"{prefix}.norm1.gamma"] = block.norm1_gamma
            params[f"{prefix}.norm1.beta"] = block.norm1_beta
            params[f"{prefix}.norm2.gamma"] = block.norm2_gamma
            params[f"{prefix}.norm2.beta"] = block.norm2_beta
            for tag, ffn in [("public", block.routed_ffn.ffn_public)] + [
                    (f"private{d}", p)
                    for d, p in enumerate(block.routed_ffn.ffn_private)]:
                params[f"{prefix}.ffn_{tag}.w1"] = ffn.w1
                params[f"{prefix}.ffn_{tag}.b1"] = ffn.b1
                params[f"{prefix}.ffn_{tag}.w2"] = ffn.w2
                params[f"{prefix}.ffn_{tag}.b2"] = ffn.b2
        params["dialect.table"] = self.encoder.dialect_table.weights
        params["enc_fusion.weight"] = self.encoder.fusion.weight
        params["enc_fusion.bias"] = self.encoder.fusion.bias
        for name in ("w1", "b1", "norm_gamma", "norm_beta", "w2", "b2"):
            params[f"dur.{name}"] = getattr(self.duration, name)
        params["align_proj.weight"] = self.align_proj.weight
        params["align_proj.bias"] = self.align_proj.bias
        params["dec_fusion.weight"] = self.dec_fusion.weight
        params["dec_fusion.bias"] = self.dec_fusion.bias
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            params[f"field.{name}"] = getattr(self.field, name)
        return params

    def save(self, path: str | Path) -> None:
        meta = {"kind": "synthesis-model"}
        for key, value in vars(self.config).items():
            meta[f"config.{key}"] = repr(value)
        save_checkpoint(path, self.named_params(), meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "SynthesisModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "synthesis-model":
            raise ValueError(f"{path} is not a synthesis model checkpoint")
        kwargs = {}
        for key, value in meta.items():
            if key.startswith("config."):
                name = key[len("config."):]
                default = getattr(ModelConfig, name)
                if isinstance(default, bool):
                    kwargs[name] = value == "True"
                elif isinstance(default, int):
                    kwargs[name] = int(value)
                else:
                    kwargs[name] = float(value)
        config = ModelConfig(**kwargs)
        model = cls(config, seed=0)
        own = model.named_params()
        if set(own) != set(params):
            missing = set(own) ^ set(params)
            raise ValueError(f"checkpoint parameter names mismatch: {missing}")
        for name, tensor in own.items():
            if tensor.shape != params[name].shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{params[name].shape} vs {tensor.shape}")
            tensor.data = params[name].data
        return model

    # ------------------------------------------------------------------
    # forward paths

    def encode(self, token_ids, did: int,
               trace: list[tuple[int, int]] | None = None) -> Tensor:
        return encoder_forward(token_ids, did, self.encoder, trace=trace)

    def _project_to_mel(self, h_text: Tensor) -> Tensor:
        return self.align_proj(h_text)

    def _fused_condition(self, h_text: Tensor, did: int,
                         durations) -> Tensor:
        cond = length_regulate(h_text, durations)
        h_did = embed_dialect(did, self.encoder.dialect_table)
        return fuse(cond, h_did, self.dec_fusion)

    def losses(self, sample: TrainSample,
               rng: np.random.Generator) -> dict[str, Tensor]:
        """Duration, alignment-prior and flow-matching losses for one sample."""
        cfg = self.config
        mel = np.asarray(sample.mel, dtype=np.float64)
        h_text = self.encode(sample.token_ids, sample.did)
        proj = self._project_to_mel(h_text)

        scores = alignment_scores(proj.data, mel)
        path = mas(scores)

        upsampled = length_regulate(proj, path)
        prior_diff = sub(upsampled, Tensor(mel))
        prior_loss = reduce_mean(mul(prior_diff, prior_diff))

        log_target = Tensor(np.log(np.asarray(path.durations,
                                               dtype=np.float64)).reshape(-1, 1))
        log_pred = predict_durations(h_text, self.duration)
        dur_diff = sub(log_pred, log_target)
        duration_loss = reduce_mean(mul(dur_diff, dur_diff))

        cond = self._fused_condition(h_text, sample.did, path)
        flow_loss = cfm_loss(
            [(mel, cond)],
            lambda x_t, t, c: field_forward(self.field, x_t, t, c),
            cfg.sigma_min, rng)

        total = add(flow_loss,
                    add(mul(duration_loss, cfg.duration_weight),
                        mul(prior_loss, cfg.prior_weight)))
        return {"total": total, "cfm": flow_loss,
                "duration": duration_loss, "prior": prior_loss}

    def synthesize_mel(self, token_ids, did: int, seed: int,
                       n_steps: int | None = None
                       ) -> tuple[np.ndarray, list[int]]:
        """Inference path: durations from the predictor, Euler sampling."""
        cfg = self.config
        h_text = self.encode(token_ids, did)
        log_d = predict_durations(h_text, self.duration)
        durations = durations_from_log(log_d.data)
        cond = self._fused_condition(h_text, did, durations)

        def field_np(x, t):
            return field_forward(self.field, x, t, cond).data

        mel = euler_sample(field_np, (sum(durations), cfg.n_mels),
                           n_steps or cfg.sample_steps, seed)
        return mel, durations

    def synthesize_waveform(self, text: str, dialect: str, vocab: Vocab,
                            seed: int, n_steps: int | None = None,
                            gl_iters: int = 60
                            ) -> tuple[np.ndarray, np.ndarray, dict]:
        """Full path text -> tokens -> mel -> Griffin-Lim waveform.

        Returns (samples, log-mel, timing report with rtf).
        """
        cfg = self.config
        did = dialect_id(dialect)
        tokens = tokenize(text, vocab)
        start = time.perf_counter()
        mel, durations = self.synthesize_mel(tokens.ids, did, seed,
                                             n_steps=n_steps)
        linear_mel = np.maximum(np.exp(mel) - LOG_MEL_FLOOR, 0.0)
        fb = make_mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)
        magnitude = pseudo_invert(linear_mel, fb)
        # the vocoder round trip needs a minimum number of frames; very short
        # utterances (e.g. empty text) get trailing silence frames
        min_frames = cfg.n_fft // (2 * cfg.hop) + 2
        if magnitude.shape[0] < min_frames:
            magnitude = np.vstack([
                magnitude,
                np.zeros((min_frames - magnitude.shape[0], magnitude.shape[1]))])
        samples, _ = griffin_lim(magnitude, n_fft=cfg.n_fft, hop=cfg.hop,
                                 iters=gl_iters, seed=seed)
        peak = np.max(np.abs(samples))
        if peak > 0:
            samples = samples * (0.95 / max(peak, 0.95))
        elapsed = time.perf_counter() - start
        audio_seconds = len(samples) / cfg.sample_rate
        timing = {
            "synthesis_seconds": elapsed,
            "audio_seconds": audio_seconds,
            "rtf": compute_rtf(elapsed, audio_seconds),
            "durations": durations,
        }
        return samples, mel, timing


def wav_to_logmel(samples: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Log-mel analysis matching the synthesis geometry."""
    spec = np.abs(stft(samples, n_fft=config.n_fft, hop=config.hop))
    fb = make_mel_filterbank(config.n_mels, config.n_fft, config.sample_rate)
    return np.log(mel_project(spec, fb) + LOG_MEL_FLOOR)


def train_model(model: SynthesisModel,
                samples: list[TrainSample],
                steps: int,
                batch_size: int = 8,
                lr: float = 2e-3,
                seed: int = 0,
                log_every: int = 25) -> list[dict[str, float]]:
    """Adam training over utterance batches; deterministic per seed.

    Returns one loss record per step (step index plus each loss term).
    """
    if not samples:
        raise ValueError("no training samples")
    params = model.named_params()
    state = AdamState()
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
    history: list[dict[str, float]] = []
    order: list[int] = []
    for step in range(steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(len(samples)).tolist())
        batch_idx = [order.pop() for _ in range(batch_size)]
        grad_acc: dict[str, np.ndarray] = {}
        totals = {"total": 0.0, "cfm": 0.0, "duration": 0.0, "prior": 0.0}
        for idx in batch_idx:
            sample = samples[idx]
            with Tape() as tape:
                losses = model.losses(sample, noise_rng)
            grads = backward(tape, losses["total"])
            for name, tensor in params.items():
                g = grads.get(tensor.id)
                if g is None:
                    continue
                if name in grad_acc:
                    grad_acc[name] += g.data
                else:
                    grad_acc[name] = g.data.copy()
            for key in totals:
                totals[key] += losses[key].item()
        for name in grad_acc:
            grad_acc[name] /= batch_size
        adam_step(params, grad_acc, state, lr=lr)
        record = {"step": float(step),
                  **{k: v / batch_size for k, v in totals.items()}}
        history.append(record)
        if log_every and step % log_every == 0:
            log.info("step %d: total=%.4f cfm=%.4f dur=%.4f prior=%.4f",
                     step, record["total"], record["cfm"],
                     record["duration"], record["prior"])
    return history
