"""Privacy mechanisms: generator plus simulated adversary/utility heads.

A mechanism is an encoder/decoder generator with two single-output heads
reading the reconstructed features: an adversary head predicting the
private label and a utility head predicting the utility label. Two
adversarial schedules are supported:

* ``alfr``: standard autoencoder; the adversary head takes ascent steps
  on the composite loss while generator and utility head descend on it.
* ``uae-pupet``: noisy-bottleneck autoencoder; the generator descends on
  the composite loss while each head independently descends on its own
  cross-entropy.

All tensors live in standardized feature space; ``sanitize`` handles the
round trip to raw scale.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import apply_standardizer, invert_standardizer
from .errors import ConfigError, TrainingError

ALFR = "alfr"
UAE_PUPET = "uae-pupet"
VARIANTS = (ALFR, UAE_PUPET)

MODES = ("train", "sanitize")

GENERATOR_FILE = "gen.hznn"
ADVERSARY_FILE = "sp.hznn"
UTILITY_FILE = "su.hznn"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class TrainSettings:
    """Hyperparameters for one mechanism training run."""

    alpha: float = 1.0
    lambda_p: float = 0.2
    lambda_u: float = 1.0
    noise_sd: float = 0.1  # bottleneck noise scale, uae-pupet only
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    enc_hidden: tuple = (64, 32)
    bottleneck: int = 8
    head_hidden: tuple = (32, 16)

    def __post_init__(self):
        if min(self.alpha, self.lambda_p, self.lambda_u, self.noise_sd) < 0:
            raise ConfigError("loss weights and noise sd must be >= 0")
        if self.alpha == 0 and self.lambda_u == 0:
            raise ConfigError("at least one of alpha, lambda_u must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad epochs/batch size")


@dataclass(frozen=True)
class LossBreakdown:
    C: float  # reconstruction
    l_p: float  # adversary cross-entropy
    l_u: float  # utility cross-entropy
    L: float  # alpha*C - lambda_p*l_p + lambda_u*l_u


def compose_loss(C, l_p, l_u, settings):
    L = settings.alpha * C - settings.lambda_p * l_p + settings.lambda_u * l_u
    return LossBreakdown(C=C, l_p=l_p, l_u=l_u, L=L)


class MechanismState:
    """Generator pair, heads, and their optimizer states for one group."""

    def __init__(self, encoder, decoder, s_p, s_u, variant, settings):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        if encoder.output_dim != decoder.input_dim:
            raise ConfigError("encoder/decoder bottleneck dims differ")
        if decoder.output_dim != encoder.input_dim:
            raise ConfigError("decoder must reconstruct the encoder input")
        for head, name in ((s_p, "adversary"), (s_u, "utility")):
            if head.input_dim != encoder.input_dim or head.output_dim != 1:
                raise ConfigError(f"{name} head must map features to one unit")
        self.encoder = encoder
        self.decoder = decoder
        self.s_p = s_p
        self.s_u = s_u
        self.variant = variant
        self.u_phase = True
        lr = settings.learning_rate
        self.opt_enc = nn.Adam(encoder, lr=lr)
        self.opt_dec = nn.Adam(decoder, lr=lr)
        self.opt_p = nn.Adam(s_p, lr=lr)
        self.opt_u = nn.Adam(s_u, lr=lr)

    @property
    def n_features(self):
        return self.encoder.input_dim


def init_mechanism(n_features, settings, variant, generator_from=None):
    """Fresh mechanism; optionally warm-start the generator from another state.

    Heads are always initialized fresh so a retrained mechanism never
    inherits a stale adversary.
    """
    rng = np.random.default_rng(np.random.SeedSequence(settings.seed))
    enc_dims = [n_features, *settings.enc_hidden, settings.bottleneck]
    dec_dims = enc_dims[::-1]
    encoder = nn.DenseNet.create(enc_dims, [nn.RELU] * (len(enc_dims) - 1), rng)
    decoder = nn.DenseNet.create(
        dec_dims, [nn.RELU] * (len(dec_dims) - 2) + [nn.IDENTITY], rng
    )
    head_dims = [n_features, *settings.head_hidden, 1]
    head_acts = [nn.RELU] * (len(head_dims) - 2) + [nn.SIGMOID]
    s_p = nn.DenseNet.create(head_dims, head_acts, rng)
    s_u = nn.DenseNet.create(head_dims, head_acts, rng)
    if generator_from is not None:
        encoder = generator_from.encoder.copy()
        decoder = generator_from.decoder.copy()
    return MechanismState(encoder, decoder, s_p, s_u, variant, settings)


def _noisy_bottleneck(state, code, settings, rng, variant):
    if variant == UAE_PUPET and settings.noise_sd > 0:
        if rng is None:
            raise ConfigError("uae-pupet generator needs an rng for the noise")
        return code + settings.noise_sd * rng.standard_normal(code.shape)
    return code


def generator_apply(state, x, settings, mode="sanitize", rng=None):
    """Run the generator: encode, perturb the bottleneck (uae-pupet), decode.

    The noise regime is identical in train and sanitize modes, so the
    published data matches what the heads were trained against.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    code, _ = state.encoder.forward(x)
    code = _noisy_bottleneck(state, code, settings, rng, state.variant)
    out, _ = state.decoder.forward(code)
    return out


def _forward_pass(state, batch, settings, rng):
    """Full forward with caches for every sub-network."""
    code, cache_e = state.encoder.forward(batch.features)
    code = _noisy_bottleneck(state, code, settings, rng, state.variant)
    x_hat, cache_d = state.decoder.forward(code)
    p_p, cache_p = state.s_p.forward(x_hat)
    p_u, cache_u = state.s_u.forward(x_hat)
    return x_hat, p_p, p_u, (cache_e, cache_d, cache_p, cache_u)


def composite_loss(state, batch, settings, rng=None):
    """Loss breakdown on one batch without touching any parameters."""
    x_hat, p_p, p_u, _ = _forward_pass(state, batch, settings, rng)
    C, _ = nn.mse(x_hat, batch.features)
    l_p, _ = nn.bce(p_p.ravel(), batch.private)
    l_u, _ = nn.bce(p_u.ravel(), batch.utility)
    return compose_loss(C, l_p, l_u, settings)


def _generator_grads(state, batch, settings, caches, grad_C, grad_p, grad_u):
    """Gradients of L wrt encoder and decoder parameters.

    dL/dx_hat collects the reconstruction term and the two head input
    gradients; bottleneck noise is additive so the encoder sees the
    decoder's input gradient unchanged.
    """
    cache_e, cache_d, cache_p, cache_u = caches
    _, dxhat_p = state.s_p.backward(cache_p, grad_p.reshape(-1, 1))
    _, dxhat_u = state.s_u.backward(cache_u, grad_u.reshape(-1, 1))
    dxhat = (
        settings.alpha * grad_C
        - settings.lambda_p * dxhat_p
        + settings.lambda_u * dxhat_u
    )
    dec_grads, dcode = state.decoder.backward(cache_d, dxhat)
    enc_grads, _ = state.encoder.backward(cache_e, dcode)
    return enc_grads, dec_grads


def _step(state, batch, settings, rng, step_index=None):
    """One alternating update per the active variant; toggles the phase."""
    x_hat, p_p, p_u, caches = _forward_pass(state, batch, settings, rng)
    cache_e, cache_d, cache_p, cache_u = caches
    C, grad_C = nn.mse(x_hat, batch.features)
    l_p, grad_p = nn.bce(p_p.ravel(), batch.private)
    l_u, grad_u = nn.bce(p_u.ravel(), batch.utility)
    breakdown = compose_loss(C, l_p, l_u, settings)
    if not np.isfinite(breakdown.L):
        raise TrainingError(
            f"non-finite loss C={C} l_p={l_p} l_u={l_u}", iteration=step_index
        )

    if state.variant == ALFR:
        if state.u_phase:
            # ascent on L wrt the adversary head only; dL/dgamma_p is
            # -lambda_p * dl_p/dgamma_p, so feed the ascent as a descent
            # on lambda_p * l_p
            grads_p, _ = state.s_p.backward(cache_p, grad_p.reshape(-1, 1))
            state.opt_p.step(state.s_p, grads_p, scale=settings.lambda_p)
        else:
            # gradients for gamma and gamma_u are all taken at the current
            # point before any update lands
            grads_u, _ = state.s_u.backward(cache_u, grad_u.reshape(-1, 1))
            enc_grads, dec_grads = _generator_grads(
                state, batch, settings, caches, grad_C, grad_p, grad_u
            )
            state.opt_u.step(state.s_u, grads_u, scale=settings.lambda_u)
            state.opt_enc.step(state.encoder, enc_grads)
            state.opt_dec.step(state.decoder, dec_grads)
    else:  # uae-pupet
        if state.u_phase:
            enc_grads, dec_grads = _generator_grads(
                state, batch, settings, caches, grad_C, grad_p, grad_u
            )
            state.opt_enc.step(state.encoder, enc_grads)
            state.opt_dec.step(state.decoder, dec_grads)
        else:
            grads_p, _ = state.s_p.backward(cache_p, grad_p.reshape(-1, 1))
            state.opt_p.step(state.s_p, grads_p)
            grads_u, _ = state.s_u.backward(cache_u, grad_u.reshape(-1, 1))
            state.opt_u.step(state.s_u, grads_u)

    state.u_phase = not state.u_phase
    return breakdown


def alfr_step(state, batch, settings, rng=None, step_index=None):
    if state.variant != ALFR:
        raise ConfigError(f"alfr_step on a {state.variant} mechanism")
    return _step(state, batch, settings, rng, step_index)


def pupet_step(state, batch, settings, rng=None, step_index=None):
    if state.variant != UAE_PUPET:
        raise ConfigError(f"pupet_step on a {state.variant} mechanism")
    return _step(state, batch, settings, rng, step_index)


def train_mechanism(features, private, utility, settings, variant, init_state=None):
    """Train one mechanism on standardized features with the given labels.

    Runs epochs x minibatches of alternating steps, toggling the phase
    every minibatch. Returns (state, trace) where trace holds one
    batch-averaged LossBreakdown per epoch.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ConfigError("empty training set")
    state = init_mechanism(
        features.shape[1], settings, variant, generator_from=init_state
    )
    rng = np.random.default_rng(np.random.SeedSequence(settings.seed).spawn(1)[0])
    trace = []
    step_index = 0
    for _ in range(settings.epochs):
        order = rng.permutation(features.shape[0])
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), settings.batch_size):
            idx = order[start : start + settings.batch_size]
            batch = nn.Batch(features[idx], private[idx], utility[idx])
            b = _step(state, batch, settings, rng, step_index)
            sums += (b.C, b.l_p, b.l_u, b.L)
            n_batches += 1
            step_index += 1
        sums /= n_batches
        trace.append(LossBreakdown(*sums))
    return state, trace


def sanitize(state, features, stats, settings, seed):
    """Sanitize raw-scale features through the trained generator.

    stats must be the standardizer fitted on the mechanism's training
    rows; output is back on raw scale, ready for publication.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != state.n_features:
        raise ConfigError(
            f"mechanism expects {state.n_features} features, got {features.shape[1]}"
        )
    x = apply_standardizer(stats, features)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = generator_apply(state, x, settings, mode="sanitize", rng=rng)
    return invert_standardizer(stats, out)


# ---------------------------------------------------------------------------
# checkpoints


def _concat_generator(state):
    return nn.DenseNet(
        [nn.Layer(l.W.copy(), l.b.copy(), l.act) for l in state.encoder.layers]
        + [nn.Layer(l.W.copy(), l.b.copy(), l.act) for l in state.decoder.layers]
    )


def save_mechanism(state, directory, settings, fingerprint, iteration):
    """Checkpoint the three networks plus a manifest into a directory."""
    os.makedirs(directory, exist_ok=True)
    nn.save_net(_concat_generator(state), os.path.join(directory, GENERATOR_FILE))
    nn.save_net(state.s_p, os.path.join(directory, ADVERSARY_FILE))
    nn.save_net(state.s_u, os.path.join(directory, UTILITY_FILE))
    manifest = {
        "variant": state.variant,
        "encoder_layers": len(state.encoder.layers),
        "settings": dataclasses.asdict(settings),
        "training_data_sha256": fingerprint,
        "iteration": iteration,
    }
    with open(os.path.join(directory, MANIFEST_FILE), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mechanism(directory):
    """Rebuild a MechanismState from a checkpoint directory.

    Optimizer state is not part of the checkpoint; loaded mechanisms get
    fresh optimizers.
    """
    with open(os.path.join(directory, MANIFEST_FILE)) as fh:
        manifest = json.load(fh)
    gen = nn.load_net(os.path.join(directory, GENERATOR_FILE))
    n_enc = manifest["encoder_layers"]
    encoder = nn.DenseNet(gen.layers[:n_enc])
    decoder = nn.DenseNet(gen.layers[n_enc:])
    s_p = nn.load_net(os.path.join(directory, ADVERSARY_FILE))
    s_u = nn.load_net(os.path.join(directory, UTILITY_FILE))
    raw = dict(manifest["settings"])
    raw["enc_hidden"] = tuple(raw["enc_hidden"])
    raw["head_hidden"] = tuple(raw["head_hidden"])
    settings = TrainSettings(**raw)
    state = MechanismState(
        encoder, decoder, s_p, s_u, manifest["variant"], settings
    )
    return state, manifest
