"""Normal refinement network.

Each point carries X canonical filtered normals, one local point patch and
X height maps. Per sample:

* the point module (shared MLP, max over the patch, FC layers) emits a
  transform T1 that maps every branch normal V to Y1 = T1 V;
* the height-map module (conv stack over the X maps as channels, FC layers)
  emits T2 and Y2 = T2 Y1;
* each normal is also lifted by two FC layers;
* the per-branch features [Y1, Y2, lift] of all branches are concatenated
  and the output head regresses the canonical-frame normal.

Samples are clustered by their canonical normals and every cluster gets its
own parameters. Module weights are shared by all branches of a sample.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ShapeMismatch, ZeroQuaternion, ZeroVector
from .features import BranchInputs, FeatureParams, build_branch_inputs
from .filtering import ClusterModel, FilterParams, assign_cluster, flip_up, from_frame, kmeans_cluster, to_frame
from .geometry import PointCloud, SpatialIndex, build_index

log = logging.getLogger(__name__)

CONNECTIONS = ("weight", "transform", "rotation")
MODEL_MAGIC = b"NFMD"
MODEL_VERSION = 1


@dataclass
class NetConfig:
    """Layer widths and switches. Defaults follow the full-size architecture."""

    point_mlp: tuple[int, ...] = (64, 64, 64, 128, 1024)
    point_fc: tuple[int, ...] = (256, 128)
    conv: tuple[int, ...] = (64, 64, 0, 128, 128, 0, 128)  # 0 marks a 3x3 max-pool
    hmp_fc: tuple[int, ...] = (256, 128)
    feature_dim: int = 64  # rows p of the weight-matrix connections
    lift: tuple[int, ...] = (64, 64)
    head: tuple[int, ...] = (512, 256)
    keep_prob: float = 0.3
    connection1: str = "weight"
    connection2: str = "weight"
    use_points: bool = True
    use_hmp: bool = True

    def __post_init__(self):
        for key in ("point_mlp", "point_fc", "conv", "hmp_fc", "lift", "head"):
            setattr(self, key, tuple(int(v) for v in getattr(self, key)))
        if self.connection1 not in CONNECTIONS or self.connection2 not in CONNECTIONS:
            raise ValueError(f"connections must be one of {CONNECTIONS}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.use_hmp and self.connection2 == "rotation" and self.dim_y1 != 3:
            raise ValueError("a rotation connection needs a 3-vector input")
        if not self.point_mlp or not self.conv or self.conv[0] == 0:
            raise ValueError("point_mlp and conv need at least one layer")

    @property
    def dim_y1(self) -> int:
        if not self.use_points:
            return 3
        return self.feature_dim if self.connection1 == "weight" else 3

    @property
    def dim_y2(self) -> int:
        if not self.use_hmp:
            return 0
        return self.feature_dim if self.connection2 == "weight" else 3

    @property
    def d1(self) -> int:
        return connection_dim(self.connection1, self.feature_dim, 3)

    @property
    def d2(self) -> int:
        return connection_dim(self.connection2, self.feature_dim, self.dim_y1)

    @property
    def branch_width(self) -> int:
        return (self.dim_y1 if self.use_points else 0) + self.dim_y2 + self.lift[-1]


FULL_NET = NetConfig()
DESK_NET = NetConfig(point_mlp=(16, 16, 32), point_fc=(32, 32), conv=(8, 0, 16),
                     hmp_fc=(32, 32), feature_dim=16, lift=(16, 16), head=(64, 32))


def connection_dim(kind: str, p: int, q: int) -> int:
    if kind == "rotation":
        return 4
    if kind == "transform":
        return 9
    return p * q


# -- connection modules -------------------------------------------------------

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z), shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _quat_matrix_grad(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull dL/dR (..., 3, 3) back to dL/dq (..., 4)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = np.moveaxis(g, (-2, -1), (0, 1))
    dw = 2 * (-z * g[0, 1] + y * g[0, 2] + z * g[1, 0] - x * g[1, 2] - y * g[2, 0] + x * g[2, 1])
    dx = 2 * (y * g[0, 1] + z * g[0, 2] + y * g[1, 0] - 2 * x * g[1, 1] - w * g[1, 2]
              + z * g[2, 0] + w * g[2, 1] - 2 * x * g[2, 2])
    dy = 2 * (-2 * y * g[0, 0] + x * g[0, 1] + w * g[0, 2] + x * g[1, 0] + z * g[1, 2]
              - w * g[2, 0] + z * g[2, 1] - 2 * y * g[2, 2])
    dz = 2 * (-2 * z * g[0, 0] - w * g[0, 1] + x * g[0, 2] + w * g[1, 0] - 2 * z * g[1, 1]
              + y * g[1, 2] + x * g[2, 0] + y * g[2, 1])
    return np.stack([dw, dx, dy, dz], -1)


def connection_matrix(kind: str, t_raw: np.ndarray, q: int):
    """Transform T (..., p, q) from a raw module output (..., d)."""
    t_raw = np.asarray(t_raw, dtype=np.float64)
    if kind == "rotation":
        if q != 3:
            raise ShapeMismatch("rotation connection needs 3-vector inputs")
        if t_raw.shape[-1] != 4:
            raise ShapeMismatch(f"rotation connection needs 4 outputs, got {t_raw.shape[-1]}")
        norm = np.linalg.norm(t_raw, axis=-1, keepdims=True)
        if np.any(norm < 1e-12):
            raise ZeroQuaternion("quaternion output has (near) zero norm")
        unit = t_raw / norm
        return quat_to_matrix(unit), (unit, norm)
    if kind == "transform":
        if q != 3 or t_raw.shape[-1] != 9:
            raise ShapeMismatch("transform connection needs 9 outputs and 3-vector inputs")
        return t_raw.reshape(*t_raw.shape[:-1], 3, 3), None
    if t_raw.shape[-1] % q:
        raise ShapeMismatch(f"weight connection: {t_raw.shape[-1]} outputs not divisible by q={q}")
    return t_raw.reshape(*t_raw.shape[:-1], t_raw.shape[-1] // q, q), None


def connection_apply(kind: str, t_raw, v) -> np.ndarray:
    """Y = T V for one transform and one (q,) vector or a (..., q) stack."""
    v = np.asarray(v, dtype=np.float64)
    t, _ = connection_matrix(kind, t_raw, v.shape[-1])
    return v @ np.swapaxes(t, -1, -2)


def _connect_fwd(kind, t_raw, v):
    # t_raw (B, d), v (B, X, q) -> (B, X, p)
    t, aux = connection_matrix(kind, t_raw, v.shape[-1])
    return np.einsum("bpq,bxq->bxp", t, v), (kind, t, aux, v)


def _connect_bwd(cache, g):
    kind, t, aux, v = cache
    dt = np.einsum("bxp,bxq->bpq", g, v)
    dv = np.einsum("bpq,bxp->bxq", t, g)
    if kind == "rotation":
        unit, norm = aux
        du = _quat_matrix_grad(unit, dt)
        dt_raw = (du - unit * np.sum(unit * du, axis=-1, keepdims=True)) / norm
    else:
        dt_raw = dt.reshape(len(dt), -1)
    return dt_raw, dv


# -- network ------------------------------------------------------------------

def _fc_block(prefix, c_in, widths, keep, final=None):
    layers = []
    for i, w in enumerate(widths):
        name = f"{prefix}.fc{i}"
        layers += [nn.fc(name, c_in, w), nn.batchnorm(name + ".bn", w), nn.relu(name + ".relu")]
        if keep < 1.0:
            layers.append(nn.dropout(name + ".drop", keep))
        c_in = w
    if final is not None:
        layers.append(nn.fc(f"{prefix}.out", c_in, final))
    return layers


def build_layers(cfg: NetConfig, branches: int, m: int) -> dict[str, list]:
    """Layer lists of the four sub-networks."""
    layers = {}
    if cfg.use_points:
        pts, c = [], 3
        for i, w in enumerate(cfg.point_mlp):
            name = f"point.mlp{i}"
            pts += [nn.shared_mlp(name, c, w), nn.batchnorm(name + ".bn", w), nn.relu(name + ".relu")]
            c = w
        pts.append(nn.max_over_set("point.pool"))
        pts += _fc_block("point", c, cfg.point_fc, cfg.keep_prob, cfg.d1)
        layers["point"] = pts
    if cfg.use_hmp:
        hm, c = [], branches
        for i, w in enumerate(cfg.conv):
            if w == 0:
                hm.append(nn.maxpool3x3(f"hmp.pool{i}"))
            else:
                hm += [nn.conv3x3(f"hmp.conv{i}", c, w), nn.relu(f"hmp.conv{i}.relu")]
                c = w
        hm.append(nn.flatten("hmp.flat"))
        hm += _fc_block("hmp", c * m * m, cfg.hmp_fc, cfg.keep_prob, cfg.d2)
        layers["hmp"] = hm
    layers["lift"] = _fc_block("lift", 3, cfg.lift, 1.0)
    layers["head"] = _fc_block("head", branches * cfg.branch_width, cfg.head, cfg.keep_prob, 3)
    return layers


class RefineNet:
    """One cluster's network: layer lists plus their parameters."""

    def __init__(self, cfg: NetConfig, branches: int, m: int, params: nn.ParamStore | None = None, seed=0):
        self.cfg = cfg
        self.branches = branches
        self.m = m
        self.layers = build_layers(cfg, branches, m)
        if params is None:
            rng = np.random.default_rng(seed)
            params = nn.ParamStore()
            for key in ("point", "hmp", "lift", "head"):
                if key in self.layers:
                    nn.init_params(self.layers[key], rng, params)
        self.params = params

    def forward(self, normals, patches, hmps, mode=nn.EVAL, rng=None):
        """Raw (unnormalized) canonical-frame predictions (B, 3) and a tape."""
        normals = np.asarray(normals, dtype=np.float64)
        b, x, _ = normals.shape
        if x != self.branches:
            raise ShapeMismatch(f"expected {self.branches} branches, got {x}")
        if mode == nn.TRAIN and rng is None:
            rng = np.random.default_rng(0)
        tape = {}
        parts = []
        y1 = normals
        if self.cfg.use_points:
            t1, tape["point"] = nn.forward(self.layers["point"], self.params, patches, mode, rng)
            y1, tape["conn1"] = _connect_fwd(self.cfg.connection1, t1, normals)
            parts.append(y1)
        if self.cfg.use_hmp:
            hm = np.asarray(hmps, dtype=np.float64)
            if hm.shape[1:] != (self.branches, self.m, self.m):
                raise ShapeMismatch(f"expected height maps (B, {self.branches}, {self.m}, {self.m}), got {hm.shape}")
            t2, tape["hmp"] = nn.forward(self.layers["hmp"], self.params, hm, mode, rng)
            y2, tape["conn2"] = _connect_fwd(self.cfg.connection2, t2, y1)
            parts.append(y2)
        lift, tape["lift"] = nn.forward(self.layers["lift"], self.params, normals.reshape(b * x, 3), mode, rng)
        parts.append(lift.reshape(b, x, -1))
        widths = [p.shape[-1] for p in parts]
        feat = np.concatenate(parts, axis=-1).reshape(b, -1)
        out, tape["head"] = nn.forward(self.layers["head"], self.params, feat, mode, rng)
        tape["widths"] = widths
        tape["shape"] = (b, x)
        return out, tape

    def backward(self, tape, g_out) -> dict:
        grads = {}

        def merge(new):
            for k, v in new.items():
                grads[k] = grads[k] + v if k in grads else v

        b, x = tape["shape"]
        g, g_feat = nn.backward(tape["head"], g_out, self.params)
        merge(g)
        g_feat = g_feat.reshape(b, x, -1)
        splits = np.cumsum(tape["widths"])[:-1]
        pieces = np.split(g_feat, splits, axis=-1)
        g_lift = pieces[-1]
        g, _ = nn.backward(tape["lift"], g_lift.reshape(b * x, -1), self.params)
        merge(g)
        g_y1 = pieces[0] if self.cfg.use_points else None
        if self.cfg.use_hmp:
            g_t2, g_y1_from2 = _connect_bwd(tape["conn2"], pieces[-2])
            g, _ = nn.backward(tape["hmp"], g_t2, self.params)
            merge(g)
            if self.cfg.use_points:
                g_y1 = g_y1 + g_y1_from2
        if self.cfg.use_points:
            g_t1, _ = _connect_bwd(tape["conn1"], g_y1)
            g, _ = nn.backward(tape["point"], g_t1, self.params)
            merge(g)
        return grads

    def bn_stats(self, tape) -> dict:
        stats = {}
        for key in ("point", "hmp", "lift", "head"):
            if key in tape:
                stats.update(tape[key].bn_stats)
        return stats


def normal_loss(pred, gt, kind: str = "l2") -> tuple[float, np.ndarray]:
    """Mean data term over the batch and its gradient w.r.t. ``pred``.

    The prediction is normalized before comparison; l2 is the squared
    Euclidean distance, l1 the sum of absolute coordinate differences.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    norm = np.linalg.norm(pred, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ZeroVector("prediction has (near) zero norm")
    u = pred / norm
    diff = u - gt
    b = len(pred)
    if kind == "l2":
        value = float(np.sum(diff ** 2)) / b
        g_u = 2.0 * diff / b
    elif kind == "l1":
        value = float(np.sum(np.abs(diff))) / b
        g_u = np.sign(diff) / b
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    g_pred = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / norm
    return value, g_pred


def loss(pred, gt, params: nn.ParamStore | None = None, lam: float = 0.02, kind: str = "l2") -> float:
    """Data term plus ``lam`` times the sum of squared weights."""
    value, _ = normal_loss(pred, gt, kind)
    if params is not None and lam:
        value += lam * nn.l2_penalty(params)[0]
    return value


def objective(net: RefineNet, normals, patches, hmps, gt, lam, kind, mode=nn.TRAIN, rng=None):
    """Loss and parameter gradients for one minibatch."""
    out, tape = net.forward(normals, patches, hmps, mode, rng)
    value, g_out = normal_loss(out, gt, kind)
    grads = net.backward(tape, g_out)
    if lam:
        reg, g_reg = nn.l2_penalty(net.params)
        value += lam * reg
        for k, v in g_reg.items():
            grads[k] = grads[k] + lam * v
    return value, grads, tape


# -- model --------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 512
    epochs: int = 100
    seed: int = 0
    clusters: int = 4
    lam: float = 0.02
    loss: str = "l2"
    bn_momentum: float = 0.9
    kmeans_iters: int = 100
    samples_per_cloud: int = 0  # 0 keeps every point of every training cloud

    def __post_init__(self):
        if self.samples_per_cloud < 0:
            raise ValueError("samples_per_cloud must be >= 0")
        if self.lr < 0 or self.batch < 2 or self.epochs < 0 or self.clusters < 1 or self.lam < 0:
            raise ValueError("invalid training hyperparameters")
        if self.loss not in ("l1", "l2"):
            raise ValueError("loss must be 'l1' or 'l2'")


DESK_TRAIN = TrainConfig(lr=0.05, batch=64, epochs=200, clusters=2, samples_per_cloud=300)


@dataclass
class RefineModel:
    net: NetConfig
    filter_params: FilterParams
    feature_params: FeatureParams
    cluster: ClusterModel
    nets: list[RefineNet]
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_history: list[float] = field(default_factory=list)

    @property
    def branches(self) -> int:
        return self.filter_params.branch_count

    def header(self) -> dict:
        return {
            "format": "normalforge-model",
            "version": MODEL_VERSION,
            "net": asdict(self.net),
            "filter": asdict(self.filter_params),
            "features": asdict(self.feature_params),
            "train": asdict(self.train),
            "clusters": self.cluster.k,
            "loss_history": [float(v) for v in self.loss_history],
        }

    def to_bytes(self) -> bytes:
        store = nn.ParamStore()
        store["cluster.centers"] = self.cluster.centers
        for c, net in enumerate(self.nets):
            for k, v in net.params.items():
                store[f"c{c}/{k}"] = v
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        return MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(head)) + head + store.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RefineModel":
        if data[:4] != MODEL_MAGIC:
            raise ValueError("not a model file")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        store, _ = nn.ParamStore.from_bytes(data, 10 + hlen)
        net_cfg = NetConfig(**header["net"])
        fp = FilterParams(**header["filter"])
        feat = FeatureParams(**header["features"])
        centers = store.pop("cluster.centers")
        nets = []
        for c in range(header["clusters"]):
            prefix = f"c{c}/"
            params = nn.ParamStore((k[len(prefix):], v) for k, v in store.items() if k.startswith(prefix))
            nets.append(RefineNet(net_cfg, fp.branch_count, feat.m, params))
        return cls(net_cfg, fp, feat, ClusterModel(centers, np.zeros(0, dtype=np.int64)), nets,
                   TrainConfig(**header["train"]), header.get("loss_history", []))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RefineModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class TrainSample:
    inputs: BranchInputs
    gt: np.ndarray  # canonical-frame ground truth (N, 3), z >= 0


def canonical_gt(gt_world: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Ground truth in each point's canonical frame, flipped to z >= 0."""
    return flip_up(to_frame(np.asarray(gt_world)[:, None, :], frames))[:, 0, :]


def make_samples(cloud: PointCloud, initial, filter_params: FilterParams,
                 feature_params: FeatureParams, seed: int = 0, index: SpatialIndex | None = None,
                 backend=None) -> TrainSample:
    if cloud.gt_normals is None:
        raise ValueError("training clouds need ground-truth normals")
    index = build_index(cloud) if index is None else index
    inputs = build_branch_inputs(cloud, index, initial, filter_params, feature_params, seed, backend)
    return TrainSample(inputs, canonical_gt(cloud.gt_normals, inputs.frames))


def training_set(clouds, initials, filter_params: FilterParams, feature_params: FeatureParams,
                 train_cfg: TrainConfig, backend=None) -> TrainSample:
    """Samples of several clouds, each optionally subsampled to
    ``train_cfg.samples_per_cloud`` points (seeded, sorted)."""
    parts = []
    for c, (cloud, initial) in enumerate(zip(clouds, initials)):
        sample = make_samples(cloud, initial, filter_params, feature_params, train_cfg.seed, backend=backend)
        keep = train_cfg.samples_per_cloud
        if keep and keep < len(cloud):
            pick = np.sort(np.random.default_rng([train_cfg.seed, 4, c]).choice(len(cloud), keep, replace=False))
            sample = TrainSample(sample.inputs.subset(pick), sample.gt[pick])
        parts.append(sample)
    return concat_samples(parts)


def concat_samples(samples: list[TrainSample]) -> TrainSample:
    fields = ("normals", "frames", "patches", "valid_counts", "hmps", "filtered")
    inputs = BranchInputs(*(np.concatenate([getattr(s.inputs, f) for s in samples]) for f in fields))
    return TrainSample(inputs, np.concatenate([s.gt for s in samples]))


def _epoch(net, data: TrainSample, idx, cfg: TrainConfig, rng, update: bool):
    order = idx[rng.permutation(len(idx))]
    total, count = 0.0, 0
    for lo in range(0, len(order), cfg.batch):
        bidx = np.sort(order[lo:lo + cfg.batch])
        if len(bidx) < 2:
            continue
        inp = data.inputs
        value, grads, tape = objective(net, inp.normals[bidx], inp.patches[bidx], inp.hmps[bidx],
                                       data.gt[bidx], cfg.lam, cfg.loss, nn.TRAIN, rng)
        if update:
            nn.sgd_step(net.params, grads, cfg.lr, net.bn_stats(tape), cfg.bn_momentum)
        total += value * len(bidx)
        count += len(bidx)
    return total, count


def train(samples, net_cfg: NetConfig = DESK_NET, train_cfg: TrainConfig = DESK_TRAIN,
          filter_params: FilterParams | None = None, feature_params: FeatureParams | None = None,
          progress=None) -> RefineModel:
    """Cluster the samples and fit one network per cluster by minibatch SGD.

    ``loss_history[0]`` is the mean training objective of the initial
    networks (TRAIN mode, no updates); entry ``e`` is the mean minibatch
    objective during epoch ``e``.
    """
    data = concat_samples(samples) if isinstance(samples, (list, tuple)) else samples
    n = len(data.gt)
    if n < train_cfg.clusters:
        raise ValueError(f"need at least {train_cfg.clusters} samples, got {n}")
    filter_params = filter_params or FilterParams()
    feature_params = feature_params or FeatureParams()
    branches = data.inputs.normals.shape[1]
    if branches != filter_params.branch_count:
        raise ShapeMismatch(f"samples have {branches} branches, filter params give {filter_params.branch_count}")
    rng = np.random.default_rng(train_cfg.seed)
    cluster = kmeans_cluster(data.inputs.descriptors, train_cfg.clusters,
                             np.random.default_rng([train_cfg.seed, 1]), train_cfg.kmeans_iters)
    nets = []
    history = np.zeros(train_cfg.epochs + 1)
    for c in range(train_cfg.clusters):
        idx = np.flatnonzero(cluster.assignments == c)
        net = RefineNet(net_cfg, branches, feature_params.m, seed=np.random.default_rng([train_cfg.seed, 2, c]))
        nets.append(net)
        if len(idx) < 2:
            log.warning("cluster %d has %d samples; left untrained", c, len(idx))
            continue
        crng = np.random.default_rng([train_cfg.seed, 3, c])
        total, count = _epoch(net, data, idx, train_cfg, crng, update=False)
        history[0] += total
        for e in range(1, train_cfg.epochs + 1):
            total, count = _epoch(net, data, idx, train_cfg, crng, update=True)
            history[e] += total
            if progress is not None:
                progress(c, e, total / max(count, 1))
    history /= n
    for e, v in enumerate(history):
        log.debug("epoch %d loss %.6f", e, v)
    return RefineModel(net_cfg, filter_params, feature_params, cluster, nets, train_cfg, history.tolist())


def predict_canonical(model: RefineModel, inputs: BranchInputs, batch: int = 256) -> np.ndarray:
    """Unit canonical-frame predictions for every point (Eval mode)."""
    ids = assign_cluster(model.cluster, inputs.descriptors)
    out = np.zeros((len(inputs), 3))
    for c, net in enumerate(model.nets):
        sel = np.flatnonzero(ids == c)
        for lo in range(0, len(sel), batch):
            b = sel[lo:lo + batch]
            raw, _ = net.forward(inputs.normals[b], inputs.patches[b], inputs.hmps[b], nn.EVAL)
            norm = np.linalg.norm(raw, axis=1, keepdims=True)
            if np.any(norm < 1e-12):
                raise ZeroVector("network output has (near) zero norm")
            out[b] = raw / norm
    return out


def predict(model: RefineModel, inputs: BranchInputs) -> np.ndarray:
    """World-frame unit normals for every point of ``inputs``."""
    canon = predict_canonical(model, inputs)
    world = from_frame(canon[:, None, :], inputs.frames)[:, 0, :]
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def predict_normal(model: RefineModel, inputs: BranchInputs, i: int) -> np.ndarray:
    return predict(model, inputs.subset(np.array([i])))[0]


def refine_field(cloud: PointCloud, initial, model: RefineModel, seed: int = 0,
                 index: SpatialIndex | None = None, backend=None, diag: float | None = None) -> np.ndarray:
    """Refine any initial normal field with a trained model."""
    index = build_index(cloud) if index is None else index
    inputs = build_branch_inputs(cloud, index, initial, model.filter_params, model.feature_params, seed,
                                 backend, diag)
    return predict(model, inputs)
