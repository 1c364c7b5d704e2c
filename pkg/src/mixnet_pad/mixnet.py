"""MixNet: attack-specialist branches fused into a genuine/attack decision.

Each branch is a backbone followed by global average pooling and a 2-node
softmax head. The branches' attack probabilities are concatenated and fed to
a trainable dense 2-node softmax (or, for ablations, a fixed max). Branches
share no parameters, so a branch loss only produces gradients inside its own
branch, while the final loss reaches every branch through the fusion layer.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ATTACKS, LabelQuadruple, ScoreQuadruple

EPS = 1e-7
FAMILIES = ("small_cnn", "resnet50", "densenet121")
SOURCES = ("none", "imagenet", "vggface2")
RESNET_ALPHAS = (0.3, 0.5, 1.0, 5.0)
DENSENET_ALPHAS = (0.33, 0.33, 0.33, 5.0)
FUSION_GAIN = 4.0


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "small_cnn"
    pretrained_source: str = "none"
    input_size: tuple[int, int, int] = (64, 64, 3)
    weights: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}; choose from {FAMILIES}")
        if self.pretrained_source not in SOURCES:
            raise ValueError(f"unknown pretrained source {self.pretrained_source!r}")
        if self.family == "small_cnn" and self.pretrained_source != "none":
            raise ValueError("small_cnn has no pretrained weights; use pretrained_source='none'")
        object.__setattr__(self, "input_size", tuple(self.input_size))


@dataclass(frozen=True)
class MixNetConfig:
    branches: tuple[tuple[str, BackboneSpec], ...] = tuple(
        (a.value, BackboneSpec()) for a in ATTACKS)
    alphas: tuple[float, ...] = DENSENET_ALPHAS
    fusion: str = "trainable"

    def __post_init__(self):
        branches = tuple((str(n), b if isinstance(b, BackboneSpec) else BackboneSpec(**b))
                         for n, b in self.branches)
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        names = [n for n, _ in branches]
        if len(names) not in (2, 3) or len(set(names)) != len(names):
            raise ValueError(f"MixNet needs 2 or 3 distinct branches, got {names}")
        bad = set(names) - {a.value for a in ATTACKS}
        if bad:
            raise ValueError(f"unknown branch name(s) {sorted(bad)}")
        if len(self.alphas) != len(names) + 1:
            raise ValueError(f"expected {len(names) + 1} alphas for {len(names)} branches, "
                             f"got {len(self.alphas)}")
        if any(a < 0 for a in self.alphas):
            raise ValueError("alphas must be nonnegative")
        if self.fusion not in ("trainable", "max"):
            raise ValueError(f"fusion must be 'trainable' or 'max', got {self.fusion!r}")

    @property
    def branch_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.branches)

    @classmethod
    def for_attacks(cls, attacks: Sequence[str], backbone: BackboneSpec | None = None,
                    alphas: Sequence[float] | None = None, fusion: str = "trainable"):
        backbone = backbone or BackboneSpec()
        names = [a.value for a in ATTACKS if a.value in set(attacks)]
        if alphas is None:
            alphas = DENSENET_ALPHAS if len(names) == 3 else (0.33, 0.33, 5.0)
        return cls(tuple((n, backbone) for n in names), tuple(alphas), fusion)


class SmallCNN(nn.Module):
    """Three conv blocks; the last keeps a 16x16 map (for 64x64 input) for CAM."""

    out_channels = 32

    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1), nn.BatchNorm2d(8), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


def _torchvision_features(spec: BackboneSpec) -> tuple[nn.Module, int]:
    import torchvision

    if spec.family == "resnet50":
        net = torchvision.models.resnet50(weights=None)
    else:
        net = torchvision.models.densenet121(weights=None)
    if spec.weights:
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state, strict=False)
    elif spec.pretrained_source != "none":
        raise ValueError(f"{spec.family} pretrained on {spec.pretrained_source} needs a weights "
                         "file; this tool never downloads weights")
    if spec.family == "resnet50":
        return nn.Sequential(*list(net.children())[:-2]), 2048
    return nn.Sequential(net.features, nn.ReLU()), 1024


def make_backbone(spec: BackboneSpec) -> tuple[nn.Module, int]:
    if spec.family == "small_cnn":
        net = SmallCNN()
        return net, net.out_channels
    if spec.family in ("resnet50", "densenet121"):
        return _torchvision_features(spec)
    raise ValueError(f"unknown backbone family {spec.family!r}; choose from {FAMILIES}")


class Branch(nn.Module):
    """Backbone, global average pooling and a 2-node head (genuine, attack)."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.features, channels = make_backbone(spec)
        self.head = nn.Linear(channels, 2)

    def forward(self, x, return_maps: bool = False):
        maps = self.features(x)
        logits = self.head(maps.mean(dim=(2, 3)))
        return (logits, maps) if return_maps else logits


def _prep(x: torch.Tensor, input_size) -> torch.Tensor:
    h, w, c = input_size
    if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
        raise ValueError(f"expected a batch of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}")
    return (x - 0.5) / 0.25


def _as_tensor(batch, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch))
    return batch.to(dtype=p.dtype)


@dataclass
class MixNetOutput:
    branch_probs: dict[str, torch.Tensor]   # name -> (N, 2)
    final_probs: torch.Tensor               # (N, 2)

    def quadruples(self) -> list[ScoreQuadruple]:
        probs = {k: v[:, 1].detach().cpu().numpy().astype(float) for k, v in self.branch_probs.items()}
        final = self.final_probs[:, 1].detach().cpu().numpy().astype(float)
        out = []
        for i in range(final.shape[0]):
            out.append(ScoreQuadruple(
                float(probs["print"][i]) if "print" in probs else 0.0,
                float(probs["replay"][i]) if "replay" in probs else 0.0,
                float(probs["mask"][i]) if "mask" in probs else None,
                float(final[i])))
        return out


class MixNetModel(nn.Module):
    def __init__(self, config: MixNetConfig):
        super().__init__()
        self.config = config
        self.input_size = config.branches[0][1].input_size
        self.branches = nn.ModuleDict({name: Branch(spec) for name, spec in config.branches})
        self.fusion = nn.Linear(len(config.branches), 2)
        self._init_fusion()
        if config.fusion == "max":
            self.fusion.requires_grad_(False)

    @torch.no_grad()
    def _init_fusion(self, gain: float = FUSION_GAIN) -> None:
        # Start as a soft OR of the branch attack probabilities: the attack
        # logit margin is gain * (sum(p) - 1/2). Each branch then begins with
        # a positive vote for "attack" instead of a random sign.
        n = self.fusion.in_features
        self.fusion.weight.copy_(torch.tensor([[-gain / 2] * n, [gain / 2] * n]))
        self.fusion.bias.copy_(torch.tensor([gain / 4, -gain / 4]))

    def fuse(self, attack_probs: torch.Tensor) -> torch.Tensor:
        """Final (N, 2) probabilities from concatenated branch attack probabilities."""
        if self.config.fusion == "max":
            p = attack_probs.max(dim=1).values
            return torch.stack([1 - p, p], dim=1)
        return F.softmax(self.fusion(attack_probs), dim=1)

    def forward(self, x) -> MixNetOutput:
        x = _prep(_as_tensor(x, self), self.input_size)
        probs = {name: F.softmax(br(x), dim=1) for name, br in self.branches.items()}
        attack = torch.stack([probs[n][:, 1] for n in self.branches], dim=1)
        return MixNetOutput(probs, self.fuse(attack))

    def branch_parameters(self, name: str) -> list[tuple[str, nn.Parameter]]:
        return [(f"branches.{name}.{k}", p) for k, p in self.branches[name].named_parameters()]

    @torch.no_grad()
    def scores(self, batch) -> list[ScoreQuadruple]:
        was = self.training
        self.eval()
        try:
            return self(batch).quadruples()
        finally:
            self.train(was)


def build(config: MixNetConfig, seed: int | None = None) -> MixNetModel:
    if seed is not None:
        torch.manual_seed(seed)
    return MixNetModel(config)


def forward(model: nn.Module, batch) -> list[ScoreQuadruple]:
    """Inference scores, one quadruple per image."""
    return model.scores(batch)


# -- losses -----------------------------------------------------------------

def cross_entropy(target, probs, eps: float = EPS) -> float:
    """Categorical cross-entropy ``-sum(y * log(clamp(p, eps, 1)))``."""
    y = np.asarray(target, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"target and probs differ in length: {y.shape} vs {p.shape}")
    return float(-np.sum(y * np.log(np.clip(p, eps, 1.0))))


def _ce(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy of (N, 2) probabilities against 0/1 targets."""
    picked = probs.gather(1, target.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp(EPS, 1.0)).mean()


@dataclass
class LossBreakdown:
    print_loss: float
    replay_loss: float
    mask_loss: float
    final_loss: float
    total_loss: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def weighted_total(branch_losses: Mapping[str, float], final_loss, alphas, names=None):
    """Weighted sum: alpha_i * branch loss i (in branch order) + alpha_last * final loss."""
    names = list(names or branch_losses)
    if len(alphas) != len(names) + 1:
        raise ValueError(f"{len(alphas)} alphas for {len(names)} branch losses")
    total = alphas[-1] * final_loss
    for a, n in zip(alphas[:-1], names):
        total = total + a * branch_losses[n]
    return total


def labels_tensor(labels: Sequence[LabelQuadruple]) -> torch.Tensor:
    return torch.as_tensor(np.asarray(labels, dtype=np.int64).reshape(-1, 4))


def loss_terms(outputs: MixNetOutput, labels, alphas) -> dict[str, torch.Tensor]:
    """Differentiable branch, final and total losses."""
    y = labels if isinstance(labels, torch.Tensor) else labels_tensor(labels)
    if y.shape[0] != outputs.final_probs.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {outputs.final_probs.shape[0]} outputs")
    column = {"print": 0, "replay": 1, "mask": 2}
    terms = {n: _ce(p, y[:, column[n]]) for n, p in outputs.branch_probs.items()}
    terms["final"] = _ce(outputs.final_probs, y[:, 3])
    names = list(outputs.branch_probs)
    terms["total"] = weighted_total(terms, terms["final"], alphas, names)
    return terms


def breakdown(terms: Mapping[str, torch.Tensor | float]) -> LossBreakdown:
    def f(k):
        v = terms.get(k, 0.0)
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    return LossBreakdown(f("print"), f("replay"), f("mask"), f("final"), f("total"))


def total_loss(outputs: MixNetOutput, labels, alphas) -> LossBreakdown:
    return breakdown(loss_terms(outputs, labels, alphas))


# -- gradient routing ---------------------------------------------------------

@dataclass
class FiniteDifferenceCheck:
    branch: str
    parameter: str
    index: int
    analytic: float
    numeric: float
    decomposed: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-12)


@dataclass
class RoutingReport:
    cross_branch_max: dict[str, float] = field(default_factory=dict)   # "loss->branch"
    own_grad_norm: dict[str, float] = field(default_factory=dict)
    final_grad_norm: dict[str, float] = field(default_factory=dict)
    fd_checks: list[FiniteDifferenceCheck] = field(default_factory=list)
    fd_skipped: dict[str, int] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _grads(loss, params):
    gs = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for g, p in zip(gs, params)]


class _KinkRecorder:
    """Records which side of every ReLU and max-pool switch the forward pass
    lands on, so a finite difference that crosses one can be recognised."""

    def __init__(self, model: nn.Module):
        self.pattern: list[torch.Tensor] = []
        self._hooks = [mod.register_forward_hook(self._hook) for mod in model.modules()
                       if isinstance(mod, (nn.ReLU, nn.MaxPool2d))]

    def _hook(self, mod, inputs, output):
        x = inputs[0]
        if isinstance(mod, nn.ReLU):
            self.pattern.append(x > 0)
        else:
            self.pattern.append(F.max_pool2d(x, mod.kernel_size, mod.stride, mod.padding,
                                             mod.dilation, mod.ceil_mode, return_indices=True)[1])

    def run(self, fn):
        self.pattern = []
        out = fn()
        return out, self.pattern

    def close(self):
        for h in self._hooks:
            h.remove()


def _same(p, q) -> bool:
    return len(p) == len(q) and all(torch.equal(a, b) for a, b in zip(p, q))


def gradient_routing_check(model: MixNetModel, batch, labels, fd_per_branch: int = 5,
                           step: float = 1e-4, tol: float = 1e-3, seed: int = 0) -> RoutingReport:
    """Verify that branch losses stay inside their branch.

    Runs on a float64 copy of ``model``. For each branch ``b`` and each other
    branch's loss the gradient over ``b``'s parameters must be exactly zero;
    the own-branch and final-loss gradients must be nonzero somewhere. Total
    loss gradients at ``fd_per_branch`` random parameter entries per branch
    (drawn among entries with a non-negligible gradient) are compared with
    central finite differences and with ``alpha_b * dL_b + alpha_final * dL_final``.

    The network is only piecewise smooth. An entry whose +/-step probes flip a
    ReLU or max-pool switch is skipped (counted in ``fd_skipped``) and another
    entry is drawn, since central differences are meaningless across a kink.
    """
    m = copy.deepcopy(model).double().train()
    alphas = m.config.alphas
    names = list(m.branches)
    x = _as_tensor(batch, m)
    y = labels_tensor(labels)
    report = RoutingReport()

    terms = loss_terms(m(x), y, alphas)
    per_branch = {b: m.branch_parameters(b) for b in names}
    grads_total = {}
    for b in names:
        params = [p for _, p in per_branch[b]]
        for c in names:
            gmax = max(float(g.abs().max()) for g in _grads(terms[c], params))
            if c == b:
                report.own_grad_norm[b] = gmax
                if gmax == 0.0:
                    report.violations.append(f"{b} loss has zero gradient on its own branch")
            else:
                report.cross_branch_max[f"{c}->{b}"] = gmax
                if gmax != 0.0:
                    report.violations.append(f"{c} loss reaches branch {b} (max |grad| {gmax:g})")
        g_final = _grads(terms["final"], params)
        report.final_grad_norm[b] = max(float(g.abs().max()) for g in g_final)
        if m.config.fusion == "trainable" and report.final_grad_norm[b] == 0.0:
            report.violations.append(f"final loss has zero gradient on branch {b}")
        g_own = _grads(terms[b], params)
        g_tot = _grads(terms["total"], params)
        grads_total[b] = (params, g_tot, g_own, g_final)

    rng = np.random.default_rng(seed)
    ai = {n: alphas[i] for i, n in enumerate(names)}
    rec = _KinkRecorder(m)

    def total_at():
        return float(loss_terms(m(x), y, alphas)["total"])

    try:
        with torch.no_grad():
            _, base = rec.run(total_at)
        for b in names:
            params, g_tot, g_own, g_final = grads_total[b]
            flat = torch.cat([g.reshape(-1) for g in g_tot]).abs()
            candidates = np.flatnonzero(flat.detach().numpy() > 1e-6 * float(flat.max()))
            offsets = np.cumsum([0] + [p.numel() for p in params])
            pnames = [n for n, _ in per_branch[b]]
            done = skipped = 0
            for flat_idx in rng.permutation(candidates)[:50 * fd_per_branch]:
                if done == fd_per_branch:
                    break
                k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
                j = int(flat_idx) - int(offsets[k])
                view = params[k].data.view(-1)
                orig = float(view[j])
                with torch.no_grad():
                    view[j] = orig + step
                    f_plus, pat_plus = rec.run(total_at)
                    view[j] = orig - step
                    f_minus, pat_minus = rec.run(total_at)
                    view[j] = orig
                if not (_same(base, pat_plus) and _same(base, pat_minus)):
                    skipped += 1
                    continue
                done += 1
                numeric = (f_plus - f_minus) / (2 * step)
                analytic = float(g_tot[k].reshape(-1)[j])
                decomposed = float(ai[b] * g_own[k].reshape(-1)[j]
                                   + alphas[-1] * g_final[k].reshape(-1)[j])
                chk = FiniteDifferenceCheck(b, pnames[k], j, analytic, numeric, decomposed)
                report.fd_checks.append(chk)
                if chk.rel_error >= tol:
                    report.violations.append(
                        f"finite difference mismatch at {pnames[k]}[{j}]: {analytic:g} vs {numeric:g}")
                if abs(decomposed - analytic) > 1e-9 * max(1.0, abs(analytic)):
                    report.violations.append(
                        f"total gradient at {pnames[k]}[{j}] is not alpha_b*dL_b + alpha_final*dL_final")
            report.fd_skipped[b] = skipped
            if done < min(fd_per_branch, candidates.size):
                report.violations.append(
                    f"only {done} kink-free finite-difference probes found on branch {b}")
    finally:
        rec.close()
    return report


# -- vanilla baseline and independent specialists ----------------------------

class VanillaNet(nn.Module):
    """Single backbone with a 2-node softmax head (genuine, attack)."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.input_size = spec.input_size
        self.net = Branch(spec)

    def forward(self, x) -> torch.Tensor:
        return F.softmax(self.net(_prep(_as_tensor(x, self), self.input_size)), dim=1)

    @torch.no_grad()
    def scores(self, batch) -> list[ScoreQuadruple]:
        was = self.training
        self.eval()
        try:
            p = self(batch)[:, 1].numpy().astype(float)
        finally:
            self.train(was)
        return [ScoreQuadruple(0.0, 0.0, None, float(v)) for v in p]


def build_vanilla(backbone: BackboneSpec, seed: int | None = None) -> VanillaNet:
    if seed is not None:
        torch.manual_seed(seed)
    return VanillaNet(backbone)


def combine_scores(scores: Sequence[float], mode: str) -> float:
    if mode == "max":
        return float(max(scores))
    if mode == "average":
        return float(sum(scores) / len(scores))
    raise ValueError(f"combine must be 'max' or 'average', got {mode!r}")


class IndependentEnsemble(nn.Module):
    """Separately trained genuine-vs-one-attack specialists, combined by max or mean."""

    def __init__(self, specialists: Mapping[str, BackboneSpec], combine: str = "max"):
        super().__init__()
        combine_scores([0.0], combine)
        names = [a.value for a in ATTACKS if a.value in specialists]
        if len(names) != len(specialists):
            raise ValueError(f"unknown specialist name(s) in {sorted(specialists)}")
        self.specs = {n: specialists[n] for n in names}
        self.combine = combine
        self.input_size = next(iter(self.specs.values())).input_size
        self.specialists = nn.ModuleDict({n: VanillaNet(s) for n, s in self.specs.items()})

    def with_combine(self, combine: str) -> "IndependentEnsemble":
        other = copy.copy(self)
        combine_scores([0.0], combine)
        other.combine = combine
        return other

    @torch.no_grad()
    def scores(self, batch) -> list[ScoreQuadruple]:
        per = {n: [q.final_score for q in net.scores(batch)] for n, net in self.specialists.items()}
        n = len(next(iter(per.values())))
        out = []
        for i in range(n):
            s = {k: v[i] for k, v in per.items()}
            out.append(ScoreQuadruple(s.get("print", 0.0), s.get("replay", 0.0), s.get("mask"),
                                      combine_scores(list(s.values()), self.combine)))
        return out


# -- checkpoints ----------------------------------------------------------------

def _spec_dict(spec: BackboneSpec) -> dict:
    return asdict(spec)


def save_checkpoint(model: nn.Module, path: str | os.PathLike, metadata: dict | None = None) -> None:
    """Archive holding the model kind, its config, parameters and training metadata."""
    if isinstance(model, MixNetModel):
        kind = "mixnet"
        config = {"branches": [[n, _spec_dict(s)] for n, s in model.config.branches],
                  "alphas": list(model.config.alphas), "fusion": model.config.fusion}
    elif isinstance(model, VanillaNet):
        kind, config = "vanilla", {"backbone": _spec_dict(model.spec)}
    elif isinstance(model, IndependentEnsemble):
        kind = "independent"
        config = {"specialists": {n: _spec_dict(s) for n, s in model.specs.items()},
                  "combine": model.combine}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    torch.save({"format": "mixnet-pad/checkpoint", "version": 1, "kind": kind,
                "config": config, "state_dict": model.state_dict(),
                "metadata": dict(metadata or {})}, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != "mixnet-pad/checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg, kind = blob["config"], blob["kind"]
    if kind == "mixnet":
        model = MixNetModel(MixNetConfig(tuple((n, BackboneSpec(**s)) for n, s in cfg["branches"]),
                                         tuple(cfg["alphas"]), cfg["fusion"]))
    elif kind == "vanilla":
        model = VanillaNet(BackboneSpec(**cfg["backbone"]))
    else:
        model = IndependentEnsemble({n: BackboneSpec(**s) for n, s in cfg["specialists"].items()},
                                    cfg["combine"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["metadata"]
