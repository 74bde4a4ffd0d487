"""Sender and receiver agents, the differentiable discrete channel between
them, and the per-round game computation (scores, loss, accuracy).

The sender encodes the target into its RNN's initial hidden state, runs one
step per message symbol starting from a learned start embedding, and emits
symbols through a Gumbel-Softmax channel. The receiver embeds the message,
runs its own RNN from a zero hidden state, and scores each candidate by a dot
product between the candidate encoding and the message representation.

Training-mode graphs use the soft (or straight-through hardened) channel
samples; greedy evaluation is a noise-free numpy path over frozen parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .environment import EnvironmentSpec, GameInstance, encode_objects, one_hot_encode
from .layers import EmbeddingTable, Linear, RnnCell, _uniform_init
from .rng import RngStream


@dataclass(frozen=True)
class ChannelConfig:
    """Discrete-channel settings: softmax temperature and estimator choice."""

    temperature: float = 1.0
    straight_through: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class Message:
    """A sent message: hard symbol indices, plus the soft forms when sampled.

    ``soft`` holds one probability vector per position in training mode and is
    None for greedy messages.
    """

    symbols: tuple[int, ...]
    soft: tuple[np.ndarray, ...] | None = None


def _straight_through(soft: Tensor) -> Tensor:
    """Forward the exact one-hot at the argmax; backpropagate as identity.

    The output's gradient flows to the soft sample unchanged, so training
    sees the soft sample's gradient while downstream computation sees a
    discrete symbol.
    """
    hard = np.zeros_like(soft.data)
    flat_rows = np.arange(hard.shape[0]) if hard.ndim == 2 else None
    if hard.ndim == 2:
        hard[flat_rows, soft.data.argmax(axis=-1)] = 1.0
    else:
        hard[soft.data.argmax()] = 1.0
    out = Tensor(hard, (soft,))

    def _bwd(g):
        soft.grad += g

    out._backward = _bwd
    return out


def _exponential_channel(logits: Tensor, exponentials: np.ndarray) -> Tensor:
    """softmax(logits + g) at temperature 1, with Gumbel noise g = -log(E).

    Exploits exp(l + g) = exp(l) / E to apply the noise as a division,
    avoiding a per-entry log. Identical in distribution (and in value, given
    E) to adding explicit Gumbel noise; E is clamped away from zero so the
    result is finite for any finite logits.
    """
    z = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
    z /= np.maximum(exponentials, 1e-300)
    value = z / z.sum(axis=-1, keepdims=True)
    out = Tensor(value, (logits,))

    def _bwd(g):
        if logits.needs_grad:
            logits.grad += (g - (g * value).sum(axis=-1, keepdims=True)) * value

    out._backward = _bwd
    return out


def gumbel_softmax_sample(
    logits: Tensor,
    cfg: ChannelConfig,
    rng: RngStream | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Sample from the channel: softmax((logits + g) / tau) with Gumbel noise g.

    With straight-through enabled the returned node's forward value is the
    exact one-hot at the argmax and its gradient is the soft sample's.
    ``noise`` overrides the rng draw (used to freeze noise for gradient
    checks); pass an all-zero array for a noise-free sample.
    """
    if noise is None:
        if rng is None:
            raise ValueError("either rng or explicit noise is required")
        if cfg.temperature == 1.0:
            soft = _exponential_channel(logits, rng.standard_exponential(logits.data.shape))
            return _straight_through(soft) if cfg.straight_through else soft
        noise = rng.gumbel(size=logits.data.shape)
    elif noise.shape != logits.data.shape:
        raise ad.ShapeMismatch("gumbel-noise", noise.shape, logits.data.shape)
    scaled = ad.mul(ad.add(logits, ad.constant(noise)), 1.0 / cfg.temperature)
    soft = ad.softmax(scaled)
    if cfg.straight_through:
        return _straight_through(soft)
    return soft


class SenderAgent:
    """Maps a target object to a message of one or more discrete symbols."""

    def __init__(self, encoder: Linear, rnn: RnnCell, start_embedding: Tensor,
                 head: Linear, feedback: EmbeddingTable | None, message_length: int = 1):
        self.encoder = encoder
        self.rnn = rnn
        self.start_embedding = start_embedding
        self.head = head
        self.feedback = feedback
        self.message_length = message_length
        if message_length > 1 and feedback is None:
            raise ValueError("multi-symbol messages need a feedback embedding table")

    @classmethod
    def init(cls, spec: EnvironmentSpec, vocab: int, hidden: int, embed_dim: int,
             message_length: int, rng: RngStream) -> "SenderAgent":
        feedback = None
        if message_length > 1:
            feedback = EmbeddingTable.init(vocab, embed_dim, rng.child("feedback"))
        return cls(
            encoder=Linear.init(spec.encoding_dim(), hidden, rng.child("encoder")),
            rnn=RnnCell.init(embed_dim, hidden, rng.child("rnn")),
            start_embedding=Tensor(_uniform_init(rng.child("start"), (embed_dim,), embed_dim)),
            head=Linear.init(hidden, vocab, rng.child("head")),
            feedback=feedback,
            message_length=message_length,
        )

    @property
    def vocab(self) -> int:
        return self.head.weight.data.shape[0]

    def params(self) -> list[Tensor]:
        out = self.encoder.params() + self.rnn.params() + [self.start_embedding] + self.head.params()
        if self.feedback is not None:
            out += self.feedback.params()
        return out

    def named_params(self) -> dict[str, np.ndarray]:
        named = {
            "sender.encoder.weight": self.encoder.weight.data,
            "sender.encoder.bias": self.encoder.bias.data,
            "sender.rnn.weight_ih": self.rnn.weight_ih.data,
            "sender.rnn.weight_hh": self.rnn.weight_hh.data,
            "sender.rnn.bias_ih": self.rnn.bias_ih.data,
            "sender.rnn.bias_hh": self.rnn.bias_hh.data,
            "sender.start_embedding": self.start_embedding.data,
            "sender.head.weight": self.head.weight.data,
            "sender.head.bias": self.head.bias.data,
        }
        if self.feedback is not None:
            named["sender.feedback.table"] = self.feedback.table.data
        return named

    def message_tensors(
        self,
        target_onehots: np.ndarray,
        cfg: ChannelConfig,
        rng: RngStream | None = None,
        noise: list[np.ndarray] | None = None,
    ) -> list[Tensor]:
        """Training-mode forward: one channel-sample node per message position."""
        batch = target_onehots.shape[0]
        h = self.encoder(ad.constant(target_onehots))
        x = ad.add(ad.constant(np.zeros((batch, self.start_embedding.data.shape[0]))), self.start_embedding)
        symbols: list[Tensor] = []
        for t in range(self.message_length):
            h = self.rnn.step(x, h)
            logits = self.head(h)
            y = gumbel_softmax_sample(logits, cfg, rng, None if noise is None else noise[t])
            symbols.append(y)
            if t + 1 < self.message_length:
                x = self.feedback.lookup_soft(y)
        return symbols

    def greedy_messages(self, target_onehots: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Deterministic argmax messages for a batch of targets, as (n, L) ids."""
        n = target_onehots.shape[0]
        out = np.empty((n, self.message_length), dtype=np.int64)
        for lo in range(0, n, chunk):
            sl = slice(lo, min(lo + chunk, n))
            h = self.encoder.apply(target_onehots[sl])
            x = np.broadcast_to(self.start_embedding.data, (h.shape[0], self.start_embedding.data.shape[0]))
            for t in range(self.message_length):
                h = self.rnn.step_apply(x, h)
                logits = h @ self.head.weight.data.T + self.head.bias.data
                ids = logits.argmax(axis=1)
                out[sl, t] = ids
                if t + 1 < self.message_length:
                    x = self.feedback.lookup_apply(ids)
        return out


class ReceiverAgent:
    """Scores candidate objects against the representation of a message."""

    def __init__(self, embedding: EmbeddingTable, rnn: RnnCell, encoder: Linear):
        self.embedding = embedding
        self.rnn = rnn
        self.encoder = encoder

    @classmethod
    def init(cls, spec: EnvironmentSpec, vocab: int, hidden: int, embed_dim: int,
             rng: RngStream) -> "ReceiverAgent":
        return cls(
            embedding=EmbeddingTable.init(vocab, embed_dim, rng.child("embedding")),
            rnn=RnnCell.init(embed_dim, hidden, rng.child("rnn")),
            encoder=Linear.init(spec.encoding_dim(), hidden, rng.child("encoder")),
        )

    def params(self) -> list[Tensor]:
        return self.embedding.params() + self.rnn.params() + self.encoder.params()

    def named_params(self) -> dict[str, np.ndarray]:
        return {
            "receiver.embedding.table": self.embedding.table.data,
            "receiver.rnn.weight_ih": self.rnn.weight_ih.data,
            "receiver.rnn.weight_hh": self.rnn.weight_hh.data,
            "receiver.rnn.bias_ih": self.rnn.bias_ih.data,
            "receiver.rnn.bias_hh": self.rnn.bias_hh.data,
            "receiver.encoder.weight": self.encoder.weight.data,
            "receiver.encoder.bias": self.encoder.bias.data,
        }

    def message_repr(self, symbols: list[Tensor]) -> Tensor:
        """Training-mode representation: final RNN hidden over embedded symbols.

        The initial hidden state is zero, so the first step drops the
        hidden-to-hidden term entirely.
        """
        h = self.rnn.step_from_zero(self.embedding.lookup_soft(symbols[0]))
        for y in symbols[1:]:
            h = self.rnn.step(self.embedding.lookup_soft(y), h)
        return h

    def message_repr_apply(self, message_ids: np.ndarray) -> np.ndarray:
        """Evaluation-mode representation from hard symbol ids (n, L)."""
        h = np.zeros((message_ids.shape[0], self.rnn.hidden_dim))
        for t in range(message_ids.shape[1]):
            h = self.rnn.step_apply(self.embedding.lookup_apply(message_ids[:, t]), h)
        return h

    def pair_scores(self, repr_h: np.ndarray, first_oh: np.ndarray, second_oh: np.ndarray) -> np.ndarray:
        s1 = (self.encoder.apply(first_oh) * repr_h).sum(axis=1)
        s2 = (self.encoder.apply(second_oh) * repr_h).sum(axis=1)
        return np.stack([s1, s2], axis=1)

    def decide(self, message_ids: np.ndarray, first_oh: np.ndarray, second_oh: np.ndarray) -> np.ndarray:
        """Pick a candidate per instance; ties go to the first-presented one."""
        scores = self.pair_scores(self.message_repr_apply(message_ids), first_oh, second_oh)
        return (scores[:, 1] > scores[:, 0]).astype(np.int64)


def _scores_graph(receiver: ReceiverAgent, symbols: list[Tensor],
                  first_oh: np.ndarray, second_oh: np.ndarray) -> Tensor:
    repr_h = receiver.message_repr(symbols)
    c1 = receiver.encoder(ad.constant(first_oh))
    c2 = receiver.encoder(ad.constant(second_oh))
    s1 = ad.mul(c1, repr_h).sum(axis=1, keepdims=True)
    s2 = ad.mul(c2, repr_h).sum(axis=1, keepdims=True)
    return ad.concat([s1, s2], axis=1)


def game_batch_loss(
    sender: SenderAgent,
    receiver: ReceiverAgent,
    target_oh: np.ndarray,
    first_oh: np.ndarray,
    second_oh: np.ndarray,
    labels: np.ndarray,
    cfg: ChannelConfig,
    rng: RngStream | None = None,
    mode: str = "train",
    noise: list[np.ndarray] | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy loss and per-instance correctness over a batch of rounds."""
    if mode not in ("train", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = target_oh.shape[0]
    if mode == "train":
        symbols = sender.message_tensors(target_oh, cfg, rng, noise)
    else:
        ids = sender.greedy_messages(target_oh)
        symbols = [sender_onehot(ids[:, t], sender.vocab) for t in range(ids.shape[1])]
    scores = _scores_graph(receiver, symbols, first_oh, second_oh)
    label_onehot = np.zeros((batch, 2))
    label_onehot[np.arange(batch), labels] = 1.0
    picked = ad.mul(ad.softmax(scores), label_onehot).sum(axis=1)
    loss = ad.mul(ad.log(picked).sum(), -1.0 / batch)
    choices = (scores.data[:, 1] > scores.data[:, 0]).astype(np.int64)
    return loss, choices == labels


def sender_onehot(ids: np.ndarray, vocab: int) -> Tensor:
    """Constant one-hot rows for hard symbols (evaluation-mode messages)."""
    out = np.zeros((ids.shape[0], vocab))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return ad.constant(out)


def _spec_from_agent(in_dim: int, obj: tuple) -> EnvironmentSpec:
    # dims are recoverable from the encoder input width and the object arity
    n_features = len(obj)
    if in_dim % n_features:
        raise ValueError(f"object with {n_features} features does not fit encoder width {in_dim}")
    n_values = in_dim // n_features
    return EnvironmentSpec.uniform(n_features, n_values)


def sender_forward(
    sender: SenderAgent,
    obj: tuple,
    cfg: ChannelConfig,
    rng: RngStream | None = None,
    mode: str = "train",
    noise: list[np.ndarray] | None = None,
) -> Message:
    """Produce the message for one object: sampled (train) or argmax (greedy)."""
    spec = _spec_from_agent(sender.encoder.weight.data.shape[1], obj)
    onehot = one_hot_encode(obj, spec)[None, :]
    if mode == "greedy":
        ids = sender.greedy_messages(onehot)[0]
        return Message(symbols=tuple(int(i) for i in ids))
    soft_cfg = ChannelConfig(temperature=cfg.temperature, straight_through=False)
    symbols = sender.message_tensors(onehot, soft_cfg, rng, noise)
    soft = tuple(y.data[0].copy() for y in symbols)
    return Message(symbols=tuple(int(y.data[0].argmax()) for y in symbols), soft=soft)


def receiver_forward(receiver: ReceiverAgent, msg: Message, candidates: tuple) -> np.ndarray:
    """Score an ordered candidate pair against a message; returns 2 scores."""
    spec = _spec_from_agent(receiver.encoder.weight.data.shape[1], candidates[0])
    if msg.soft is not None:
        h = np.zeros((1, receiver.rnn.hidden_dim))
        for p in msg.soft:
            h = receiver.rnn.step_apply((p[None, :] @ receiver.embedding.table.data), h)
    else:
        h = receiver.message_repr_apply(np.asarray(msg.symbols, dtype=np.int64)[None, :])
    first = one_hot_encode(candidates[0], spec)[None, :]
    second = one_hot_encode(candidates[1], spec)[None, :]
    return receiver.pair_scores(h, first, second)[0]


def game_round_loss(
    sender: SenderAgent,
    receiver: ReceiverAgent,
    instance: GameInstance,
    cfg: ChannelConfig,
    rng: RngStream | None = None,
    mode: str = "train",
    noise: list[np.ndarray] | None = None,
) -> tuple[Tensor, bool]:
    """One round: scalar cross-entropy loss node and whether the pick was right."""
    spec = _spec_from_agent(sender.encoder.weight.data.shape[1], instance.target)
    first, second = instance.presented_pair()
    target_oh = one_hot_encode(instance.target, spec)[None, :]
    first_oh = one_hot_encode(first, spec)[None, :]
    second_oh = one_hot_encode(second, spec)[None, :]
    labels = np.array([instance.label])
    loss, correct = game_batch_loss(
        sender, receiver, target_oh, first_oh, second_oh, labels, cfg, rng, mode, noise
    )
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite game loss")
    return loss, bool(correct[0])


def presented_onehots(split, spec: EnvironmentSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precompute (target, first, second, labels) encodings for a split."""
    target_oh = encode_objects(split.targets, spec)
    distractor_oh = encode_objects(split.distractors, spec)
    swap = split.labels[:, None].astype(bool)
    first_oh = np.where(swap, distractor_oh, target_oh)
    second_oh = np.where(swap, target_oh, distractor_oh)
    return target_oh, first_oh, second_oh, split.labels
