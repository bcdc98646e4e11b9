"""Sender and receiver networks.

The sender encodes a meaning into an LSTM state and emits a discrete message
symbol-by-symbol (symbol 0 is EOS; emission stops at EOS or at ``max_len``).
The receiver consumes the message with an LSTM controller coupled to a
differentiable stack: at each step the controller sees the symbol embedding
concatenated with the previous stack read, and produces a push value plus
pop/push/read strengths. Reconstruction conditions on the final controller
state. An optional prior head predicts the next symbol from the previous
read, giving a learned message prior.

Everything here is batched: meanings/messages come in lists, tensors carry a
leading batch axis, and per-item termination is handled with constant 0/1
masks that freeze finished rows (h, c and the stack stop changing once an
item's EOS has been processed, which matches running each item on its own).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .meanings import encode_meaning
from .neural_stack import StackDirectives, StackState, stack_step

EOS = 0


class AgentError(ValueError):
    """Bad message/meaning input or inconsistent agent configuration."""


class MissingPriorError(AgentError):
    """A prior quantity was requested from a receiver built without one."""


class Strategy(enum.Enum):
    """How the receiver's stack directives are produced."""

    LEARNED = "learned"
    LEFT_BRANCHING = "left"
    RANDOM_BRANCHING = "random"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        table = {
            "learned": cls.LEARNED,
            "left": cls.LEFT_BRANCHING,
            "left_branching": cls.LEFT_BRANCHING,
            "random": cls.RANDOM_BRANCHING,
            "random_branching": cls.RANDOM_BRANCHING,
        }
        try:
            return table[str(value).lower()]
        except KeyError:
            raise AgentError(f"unknown strategy {value!r}") from None


# ---------------------------------------------------------------------------
# parameter containers


class ParamModule:
    """Mixin giving flat name->Tensor views over nested parameters."""

    _params: tuple = ()
    _subs: tuple = ()

    def named_parameters(self, prefix=""):
        out = {}
        for name in self._params:
            out[prefix + name] = getattr(self, name)
        for name in self._subs:
            sub = getattr(self, name)
            if sub is None:
                continue
            if isinstance(sub, (list, tuple)):
                for i, item in enumerate(sub):
                    out.update(item.named_parameters(f"{prefix}{name}.{i}."))
            else:
                out.update(sub.named_parameters(f"{prefix}{name}."))
        return out

    def set_parameters(self, table, prefix=""):
        """Rebind parameters from ``table`` (missing keys are left alone)."""
        for name in self._params:
            t = table.get(prefix + name)
            if t is not None:
                setattr(self, name, t)
        for name in self._subs:
            sub = getattr(self, name)
            if sub is None:
                continue
            if isinstance(sub, (list, tuple)):
                for i, item in enumerate(sub):
                    item.set_parameters(table, f"{prefix}{name}.{i}.")
            else:
                sub.set_parameters(table, f"{prefix}{name}.")


def _glorot(rng, n_in, n_out, dtype):
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)


class Linear(ParamModule):
    _params = ("W", "b")

    def __init__(self, rng, n_in, n_out, dtype):
        self.W = Tensor._wrap(_glorot(rng, n_in, n_out, dtype))
        self.b = de.zeros(n_out, dtype=dtype)

    def __call__(self, x):
        y = de.matmul(x, self.W)
        return de.add_bias(y, self.b) if x.ndim == 2 else de.add(y, self.b)


class ScalarHead(ParamModule):
    """Linear map from hidden state to one scalar per row."""

    _params = ("w", "b")

    def __init__(self, rng, n_in, dtype):
        self.w = Tensor._wrap(_glorot(rng, n_in, 1, dtype).ravel())
        self.b = de.zeros((), dtype=dtype)

    def __call__(self, h):
        return de.add(de.matmul(h, self.w), self.b)


class Embedding(ParamModule):
    _params = ("table",)

    def __init__(self, rng, n_symbols, dim, dtype):
        init = (0.1 * rng.standard_normal((n_symbols, dim))).astype(dtype)
        self.table = Tensor._wrap(init)

    def __call__(self, idx):
        return de.take_rows(self.table, np.asarray(idx))


class LstmCell(ParamModule):
    """Packed-gate LSTM (order i, f, g, o); forget-gate bias starts at 1."""

    _params = ("W", "b")

    def __init__(self, rng, n_in, hidden, dtype):
        self.hidden = hidden
        self.W = Tensor._wrap(_glorot(rng, n_in + hidden, 4 * hidden, dtype))
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0
        self.b = Tensor._wrap(b)

    def step(self, x, h, c, keep=None):
        """One step over a batch; ``keep`` = (keep_mask, drop_mask) constant
        tensors freeze rows whose item already finished."""
        nH = self.hidden
        z = de.add_bias(de.matmul(de.concat([x, h]), self.W), self.b)
        i = de.sigmoid(de.slice_last(z, 0, nH))
        f = de.sigmoid(de.slice_last(z, nH, 2 * nH))
        g = de.tanh(de.slice_last(z, 2 * nH, 3 * nH))
        o = de.sigmoid(de.slice_last(z, 3 * nH, 4 * nH))
        c2 = de.add(de.mul(f, c), de.mul(i, g))
        h2 = de.mul(o, de.tanh(c2))
        if keep is not None:
            kp, dp = keep
            h2 = de.add(de.scale_rows(h2, kp), de.scale_rows(h, dp))
            c2 = de.add(de.scale_rows(c2, kp), de.scale_rows(c, dp))
        return h2, c2


def _tile_rows(vec, n):
    return de.add_bias(de.zeros((n, vec.shape[0]), dtype=vec.dtype), vec)


def _mask_pair(alive, dtype):
    kp = Tensor._wrap(alive.astype(dtype))
    dp = Tensor._wrap((~alive).astype(dtype))
    return kp, dp


def _sample_rows(p, rng):
    # invert the row CDFs; clip guards the float32 "probabilities sum to
    # 0.999999" edge
    u = rng.random(p.shape[0])
    cum = np.cumsum(p, axis=1)
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class Message:
    """One emitted message: symbols include the final EOS unless the message
    was cut off at max length. Log-probs/entropies are per emission step."""

    symbols: tuple
    log_prob: float
    entropy: float
    step_log_probs: tuple
    step_entropies: tuple

    def __len__(self):
        return len(self.symbols)


class MessageBatch:
    """Padded batch view of messages: int symbols [B, T] (EOS-padded past each
    item's length) and lengths [B] counting the EOS step."""

    def __init__(self, symbols, lengths):
        self.symbols = np.asarray(symbols, dtype=np.int64)
        self.lengths = np.asarray(lengths, dtype=np.int64)
        if self.symbols.ndim != 2 or self.lengths.shape != (self.symbols.shape[0],):
            raise AgentError("malformed message batch")

    def __len__(self):
        return self.symbols.shape[0]

    @classmethod
    def from_sequences(cls, seqs, max_len, vocab):
        seqs = [tuple(int(t) for t in s) for s in seqs]
        for s in seqs:
            if not 1 <= len(s) <= max_len:
                raise AgentError(f"message length {len(s)} outside [1, {max_len}]")
            if any(not 0 <= t < vocab for t in s):
                raise AgentError(f"message {s} has symbols outside the alphabet")
            if EOS in s[:-1]:
                raise AgentError(f"message {s} has EOS before its final symbol")
            if s[-1] != EOS and len(s) < max_len:
                raise AgentError(f"message {s} is unterminated but shorter than {max_len}")
        t_max = max(len(s) for s in seqs)
        symbols = np.full((len(seqs), t_max), EOS, dtype=np.int64)
        for b, s in enumerate(seqs):
            symbols[b, : len(s)] = s
        return cls(symbols, np.array([len(s) for s in seqs]))


def as_message_batch(messages, max_len, vocab):
    if isinstance(messages, MessageBatch):
        return messages
    seqs = [m.symbols if isinstance(m, Message) else m for m in messages]
    return MessageBatch.from_sequences(seqs, max_len, vocab)


@dataclass
class EmitResult:
    messages: list
    batch: MessageBatch
    log_probs: Tensor  # [B], on the active tape
    entropies: Tensor  # [B], sum of per-step emission entropies


# ---------------------------------------------------------------------------
# sender


class OneHotEncoder(ParamModule):
    """Attribute-value meanings -> initial (h, c) via a linear map."""

    _subs = ("lin",)

    def __init__(self, rng, space, hidden, dtype):
        self.space = space
        self.hidden = hidden
        self.dtype = dtype
        self.lin = Linear(rng, space.n_att * space.n_val, 2 * hidden, dtype)

    def __call__(self, meanings):
        rows = np.stack([encode_meaning(m, self.space, self.dtype) for m in meanings])
        hc = self.lin(Tensor._wrap(rows))
        return (
            de.slice_last(hc, 0, self.hidden),
            de.slice_last(hc, self.hidden, 2 * self.hidden),
        )


class TokenSeqEncoder(ParamModule):
    """Dyck meanings -> final (h, c) of an LSTM over the bracket tokens."""

    _params = ("h0", "c0")
    _subs = ("emb", "cell")

    def __init__(self, rng, space, hidden, embedding, dtype):
        self.space = space
        self.dtype = dtype
        self.emb = Embedding(rng, 2 * space.k, embedding, dtype)
        self.cell = LstmCell(rng, embedding, hidden, dtype)
        self.h0 = de.zeros(hidden, dtype=dtype)
        self.c0 = de.zeros(hidden, dtype=dtype)

    def __call__(self, meanings):
        toks = [encode_meaning(m, self.space) for m in meanings]
        n = len(toks)
        lengths = np.array([len(t) for t in toks])
        h = _tile_rows(self.h0, n)
        c = _tile_rows(self.c0, n)
        t_max = int(lengths.max()) if n else 0
        padded = np.zeros((n, t_max), dtype=np.int64)
        for b, t in enumerate(toks):
            padded[b, : len(t)] = t
        for t in range(t_max):
            alive = t < lengths
            keep = None if alive.all() else _mask_pair(alive, self.dtype)
            x = self.emb(padded[:, t])
            h, c = self.cell.step(x, h, c, keep)
        return h, c


class Sender(ParamModule):
    """Meaning -> message policy S(M | X)."""

    _subs = ("encoder", "emb", "cell", "out")

    def __init__(
        self,
        space,
        hidden=512,
        embedding=32,
        vocab=4,
        max_len=8,
        rng=None,
        dtype=np.float32,
    ):
        if vocab < 2:
            raise AgentError(f"vocab must be >= 2 (EOS plus content), got {vocab}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.space = space
        self.hidden = hidden
        self.embedding = embedding
        self.vocab = vocab
        self.max_len = max_len
        self.dtype = np.dtype(dtype)
        if space.kind == "attr_val":
            self.encoder = OneHotEncoder(rng, space, hidden, self.dtype)
        else:
            self.encoder = TokenSeqEncoder(rng, space, hidden, embedding, self.dtype)
        self.emb = Embedding(rng, vocab, embedding, self.dtype)
        self.cell = LstmCell(rng, embedding, hidden, self.dtype)
        self.out = Linear(rng, hidden, vocab, self.dtype)

    def encode(self, meanings):
        """Initial LSTM state (h, c), each [B, hidden]."""
        return self.encoder(meanings)

    def _unroll(self, state, n, next_symbol):
        """Shared emission loop. ``next_symbol(t, logp_data) -> [B] ints``
        chooses each step's symbol; scoring passes the recorded symbols back
        through the same op sequence so log-probs match sampling exactly."""
        h, c = state
        alive = np.ones(n, dtype=bool)
        log_prob = None
        entropy = None
        sym_steps, alive_steps, step_logps, step_ents = [], [], [], []
        x = de.zeros((n, self.embedding), dtype=self.dtype)
        for t in range(self.max_len):
            if t > 0:
                x = self.emb(sym_steps[-1])
            keep = None if alive.all() else _mask_pair(alive, self.dtype)
            h, c = self.cell.step(x, h, c, keep)
            logits = self.out(h)
            logp = de.log_softmax(logits)
            sym = np.where(alive, next_symbol(t, logp.data), EOS)
            picked = de.take_last(logp, sym)
            probs = de.softmax(logits)
            ent = de.mul(de.sum_last(de.mul(probs, logp)), -1.0)
            step_logps.append(picked.data)
            step_ents.append(ent.data)
            if keep is not None:
                picked = de.mul(picked, keep[0])
                ent = de.mul(ent, keep[0])
            log_prob = picked if log_prob is None else de.add(log_prob, picked)
            entropy = ent if entropy is None else de.add(entropy, ent)
            sym_steps.append(sym)
            alive_steps.append(alive)
            alive = alive & (sym != EOS)
            if not alive.any():
                break
        symbols = np.stack(sym_steps, axis=1)
        alive_mat = np.stack(alive_steps, axis=1)
        detail = (np.stack(step_logps, axis=1), np.stack(step_ents, axis=1))
        return symbols, alive_mat, log_prob, entropy, detail

    def emit(self, state, mode="sample", rng=None):
        """Roll the policy out. ``mode`` is "sample" (needs ``rng``) or
        "greedy"; either way emission stops at EOS or ``max_len``."""
        n = state[0].shape[0]
        if mode == "sample":
            if rng is None:
                raise AgentError("sampling emission needs an rng")
            pick = lambda t, logp: _sample_rows(np.exp(logp), rng)
        elif mode == "greedy":
            pick = lambda t, logp: logp.argmax(axis=1)
        else:
            raise AgentError(f"unknown emission mode {mode!r}")
        symbols, alive, log_prob, entropy, detail = self._unroll(state, n, pick)
        lengths = alive.sum(axis=1)
        logps, ents = detail
        messages = []
        for b in range(n):
            m = int(lengths[b])
            messages.append(
                Message(
                    symbols=tuple(int(s) for s in symbols[b, :m]),
                    log_prob=float(log_prob.data[b]),
                    entropy=float(entropy.data[b]),
                    step_log_probs=tuple(float(v) for v in logps[b, :m]),
                    step_entropies=tuple(float(v) for v in ents[b, :m]),
                )
            )
        batch = MessageBatch(symbols, lengths)
        return EmitResult(messages, batch, log_prob, entropy)

    def score(self, state, messages):
        """Log S(m | state) for given messages, [B] on the active tape."""
        batch = as_message_batch(messages, self.max_len, self.vocab)
        n = state[0].shape[0]
        if len(batch) != n:
            raise AgentError(f"scored {len(batch)} messages against {n} states")

        def pick(t, logp):
            return batch.symbols[:, t]

        _, _, log_prob, _, _ = self._unroll(state, n, pick)
        return log_prob


# ---------------------------------------------------------------------------
# receiver


@dataclass
class StepTrace:
    """Receiver internals for one message position (mainly for analysis)."""

    push_value: Tensor  # v_t, [B, hidden]
    read: Tensor  # r_t as returned by the stack, [B, hidden]
    u: Tensor
    d: Tensor
    r: Tensor


@dataclass
class EncodeResult:
    """Controller output after consuming a message batch.

    ``reads[t]`` is the stack read available *before* position t is consumed
    (``reads[0]`` is the zero vector), which is exactly what the prior head
    conditions on for symbol t.
    """

    final_h: Tensor
    final_c: Tensor
    reads: list
    stack: StackState
    trace: list | None = None


class Receiver(ParamModule):
    """Message -> meaning agent R(X | M) with a stack-augmented controller."""

    _subs = (
        "emb",
        "cell",
        "to_value",
        "to_u",
        "to_d",
        "to_r",
        "heads",
        "dec_emb",
        "dec_cell",
        "dec_out",
        "prior_out",
    )

    def __init__(
        self,
        space,
        hidden=512,
        embedding=32,
        vocab=4,
        max_len=8,
        caps=(2.0, 2.0, 2.0),
        with_prior=False,
        random_resample="per_step",
        rng=None,
        dtype=np.float32,
    ):
        if vocab < 2:
            raise AgentError(f"vocab must be >= 2 (EOS plus content), got {vocab}")
        if any(cap <= 0 for cap in caps):
            raise AgentError(f"directive caps must be positive, got {caps}")
        if random_resample not in ("per_step", "per_message"):
            raise AgentError(f"unknown random_resample mode {random_resample!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.space = space
        self.hidden = hidden
        self.embedding = embedding
        self.vocab = vocab
        self.max_len = max_len
        self.k_u, self.k_d, self.k_r = (float(c) for c in caps)
        self.random_resample = random_resample
        self.dtype = np.dtype(dtype)
        self.emb = Embedding(rng, vocab, embedding, self.dtype)
        self.cell = LstmCell(rng, embedding + hidden, hidden, self.dtype)
        self.to_value = Linear(rng, hidden, hidden, self.dtype)
        self.to_u = ScalarHead(rng, hidden, self.dtype)
        self.to_d = ScalarHead(rng, hidden, self.dtype)
        self.to_r = ScalarHead(rng, hidden, self.dtype)
        self.heads = None
        self.dec_emb = self.dec_cell = self.dec_out = None
        if space.kind == "attr_val":
            self.heads = [
                Linear(rng, hidden, space.n_val, self.dtype) for _ in range(space.n_att)
            ]
        else:
            n_tok = 2 * space.k + 1  # brackets plus the end-of-word token
            self.dec_emb = Embedding(rng, n_tok, embedding, self.dtype)
            self.dec_cell = LstmCell(rng, embedding, hidden, self.dtype)
            self.dec_out = Linear(rng, hidden, n_tok, self.dtype)
        # created last so configurations with and without a prior draw
        # identical initial values for every shared parameter
        self.prior_out = Linear(rng, hidden, vocab, self.dtype) if with_prior else None

    @property
    def has_prior(self):
        return self.prior_out is not None

    def _random_directives(self, rng, n):
        u = Tensor._wrap(rng.uniform(0.0, self.k_u, n).astype(self.dtype))
        d = Tensor._wrap(rng.uniform(0.0, self.k_d, n).astype(self.dtype))
        r = Tensor._wrap(rng.uniform(0.0, self.k_r, n).astype(self.dtype))
        return u, d, r

    def encode(self, messages, strategy, rng=None, want_trace=False):
        """Consume messages with the chosen branching strategy.

        Learned: directives are capped sigmoids of the controller state.
        Left-branching: u = d = r = 1 constants. Random-branching: uniform
        draws in [0, cap], fresh each step or once per message depending on
        ``random_resample``; draws come from ``rng`` and bypass the tape.
        """
        batch = as_message_batch(messages, self.max_len, self.vocab)
        strategy = Strategy.parse(strategy)
        if strategy is Strategy.RANDOM_BRANCHING and rng is None:
            raise AgentError("random branching needs an rng for its draws")
        n, t_max = batch.symbols.shape
        h = de.zeros((n, self.hidden), dtype=self.dtype)
        c = de.zeros((n, self.hidden), dtype=self.dtype)
        read = de.zeros((n, self.hidden), dtype=self.dtype)
        stack = StackState.empty(self.hidden, batch=n, dtype=self.dtype)
        reads = [read]
        trace = [] if want_trace else None
        ones = Tensor._wrap(np.ones(n, dtype=self.dtype))
        frozen_draws = None
        if strategy is Strategy.RANDOM_BRANCHING and self.random_resample == "per_message":
            frozen_draws = self._random_directives(rng, n)
        for t in range(t_max):
            alive = t < batch.lengths
            keep = None if alive.all() else _mask_pair(alive, self.dtype)
            x = self.emb(batch.symbols[:, t])
            h, c = self.cell.step(de.concat([x, read]), h, c, keep)
            v = de.tanh(self.to_value(h))
            if strategy is Strategy.LEARNED:
                u = de.mul(de.sigmoid(self.to_u(h)), self.k_u)
                d = de.mul(de.sigmoid(self.to_d(h)), self.k_d)
                r = de.mul(de.sigmoid(self.to_r(h)), self.k_r)
            elif strategy is Strategy.LEFT_BRANCHING:
                u = d = r = ones
            elif frozen_draws is not None:
                u, d, r = frozen_draws
            else:
                u, d, r = self._random_directives(rng, n)
            if keep is not None:
                # finished rows stop popping and push nothing
                u = de.mul(u, keep[0])
                d = de.mul(d, keep[0])
            stack, new_read = stack_step(stack, StackDirectives(v=v, u=u, d=d, r=r))
            if keep is None:
                read = new_read
            else:
                read = de.add(
                    de.scale_rows(new_read, keep[0]), de.scale_rows(read, keep[1])
                )
            reads.append(read)
            if want_trace:
                trace.append(StepTrace(push_value=v, read=new_read, u=u, d=d, r=r))
        return EncodeResult(h, c, reads, stack, trace)

    def reconstruct_logprob(self, enc, meanings):
        """log R(meaning | final state), [B] on the active tape."""
        n = enc.final_h.shape[0]
        if len(meanings) != n:
            raise AgentError(f"got {len(meanings)} meanings for {n} encodings")
        for m in meanings:
            self.space.index_of(tuple(m))
        if self.space.kind == "attr_val":
            values = np.asarray([tuple(m) for m in meanings], dtype=np.int64)
            total = None
            for a, head in enumerate(self.heads):
                lp = de.log_softmax(head(enc.final_h))
                term = de.take_last(lp, values[:, a])
                total = term if total is None else de.add(total, term)
            return total
        return self._dyck_logprob(enc, meanings)

    def _dyck_logprob(self, enc, meanings):
        end = 2 * self.space.k
        lengths = np.array([len(m) for m in meanings])
        t_tot = int(lengths.max()) + 1  # every word scores its tokens then END
        n = len(meanings)
        targets = np.full((n, t_tot), end, dtype=np.int64)
        for b, m in enumerate(meanings):
            targets[b, : len(m)] = m
        h, c = enc.final_h, enc.final_c
        x = de.zeros((n, self.embedding), dtype=self.dtype)
        total = None
        for t in range(t_tot):
            alive = t <= lengths
            keep = None if alive.all() else _mask_pair(alive, self.dtype)
            if t > 0:
                x = self.dec_emb(targets[:, t - 1])
            h, c = self.dec_cell.step(x, h, c, keep)
            lp = de.log_softmax(self.dec_out(h))
            term = de.take_last(lp, targets[:, t])
            if keep is not None:
                term = de.mul(term, keep[0])
            total = term if total is None else de.add(total, term)
        return total

    def greedy_decode(self, enc):
        """Most-likely meaning per item under the reconstruction heads."""
        if self.space.kind == "attr_val":
            picks = [head(enc.final_h).data.argmax(axis=1) for head in self.heads]
            n = enc.final_h.shape[0]
            return [tuple(int(p[b]) for p in picks) for b in range(n)]
        end = 2 * self.space.k
        n = enc.final_h.shape[0]
        h, c = enc.final_h, enc.final_c
        x = de.zeros((n, self.embedding), dtype=self.dtype)
        done = np.zeros(n, dtype=bool)
        words = [[] for _ in range(n)]
        prev = None
        for t in range(self.space.l_max):
            if t > 0:
                x = self.dec_emb(prev)
            h, c = self.dec_cell.step(x, h, c)
            sym = self.dec_out(h).data.argmax(axis=1)
            for b in range(n):
                if done[b]:
                    continue
                if sym[b] == end:
                    done[b] = True
                else:
                    words[b].append(int(sym[b]))
            if done.all():
                break
            prev = np.where(done, end, sym)
        return [tuple(w) for w in words]

    def prior_step(self, read_prev):
        """Log P(next symbol | previous read), [B, vocab]."""
        if not self.has_prior:
            raise MissingPriorError("this receiver was built without a prior head")
        return de.log_softmax(self.prior_out(read_prev))

    def message_log_prior(self, messages, reads):
        """log P(message) = sum of per-position priors, [B] on the tape.

        ``reads`` comes from ``encode`` on the same messages; position t is
        scored against ``reads[t]``. A message truncated at max length has no
        EOS and simply contributes no EOS term.
        """
        batch = as_message_batch(messages, self.max_len, self.vocab)
        n, t_max = batch.symbols.shape
        if len(reads) < t_max:
            raise AgentError(f"need {t_max} reads, got {len(reads)}")
        total = None
        for t in range(t_max):
            alive = t < batch.lengths
            keep = None if alive.all() else _mask_pair(alive, self.dtype)
            lp = self.prior_step(reads[t])
            term = de.take_last(lp, batch.symbols[:, t])
            if keep is not None:
                term = de.mul(term, keep[0])
            total = term if total is None else de.add(total, term)
        return total
