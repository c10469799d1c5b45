import numpy as np

from stela.sparse_grid import SparseVoxelSet


def random_voxel_set(rng, n, shape, dim=4, dtype=np.float64):
    """``n`` distinct voxels drawn uniformly from a grid of ``shape``, lex-sorted."""
    h, w, l = shape
    n = min(n, h * w * l)
    keys = np.sort(rng.choice(h * w * l, size=n, replace=False))
    idx = np.stack([keys // (w * l), (keys // l) % w, keys % l], axis=1)
    return SparseVoxelSet(rng.standard_normal((n, dim)).astype(dtype), idx)


def rel_err(analytic, numeric, floor=1e-6):
    """Elementwise relative error; magnitudes under ``floor`` are compared absolutely."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def central_diff(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def stela_case(seed, n=12, m=15, frames=2, k=4, dim=6, key_dim=4, shape=(6, 6, 3)):
    """Random current frame, past frames, their KNN table and STELA parameters."""
    from stela.neighborhood import build_table
    from stela.stela_core import StelaParams

    rng = np.random.default_rng(seed)
    current = random_voxel_set(rng, n, shape, dim)
    past = [random_voxel_set(rng, m, shape, dim) for _ in range(frames)]
    table = build_table(current, past, k)
    params = StelaParams.init(dim, rng, key_dim=key_dim)
    # non-zero biases so every gradient path is exercised
    for layer in (*params.key_adapter, params.gate_t, params.gate_m):
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    return current, past, table, params, rng


def stela_gradient_error(seed, **kwargs):
    """Worst relative error between analytic STELA gradients and central differences."""
    from stela.stela_core import stela_backward, stela_forward

    current, past, table, params, rng = stela_case(seed, **kwargs)
    upstream = rng.normal(size=current.features.shape)

    def loss():
        return float(np.sum(stela_forward(current, past, table, params) * upstream))

    _, cache = stela_forward(current, past, table, params, keep_cache=True)
    grads = stela_backward(cache, params, upstream)
    worst = rel_err(grads.current, central_diff(loss, current.features)).max()
    for frame, g in zip(past, grads.past):
        worst = max(worst, rel_err(g, central_diff(loss, frame.features)).max())
    for name, tensor in params.tensors().items():
        worst = max(worst, rel_err(grads.params[name], central_diff(loss, tensor)).max())
    return float(worst)


def softmax_rows(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def lovasz_oracle(probs, targets, num_classes, ignore=255):
    """Lovasz extension of the Jaccard loss evaluated from its set-function definition."""
    keep = [i for i, t in enumerate(targets) if t != ignore]
    per_class = []
    for c in range(num_classes):
        fg = {i for i in keep if targets[i] == c}
        if not fg:
            continue
        errors = {i: abs((1.0 if i in fg else 0.0) - probs[i][c]) for i in keep}
        order = sorted(keep, key=lambda i: (-errors[i], i))

        def jaccard_loss(mistakes):
            return len(mistakes) / len(fg | mistakes) if (fg | mistakes) else 0.0

        total, chosen, prev = 0.0, set(), 0.0
        for i in order:
            chosen.add(i)
            cur = jaccard_loss(chosen)
            total += errors[i] * (cur - prev)
            prev = cur
        per_class.append(total)
    return sum(per_class) / len(per_class) if per_class else 0.0
