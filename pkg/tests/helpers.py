import numpy as np

from tlguard.nn import Conv2D, Dense, Flatten, Network, ReLU, conv2d, dense


def small_net(seed=0, dtype=np.float64, classes=3, size=6):
    """conv(1->3, s2) ReLU conv(3->4) ReLU Flatten Dense(8) ReLU Dense(classes) on 1 x size x size inputs."""
    rng = np.random.default_rng(seed)
    layers = [conv2d(rng, 1, 3, k=3, stride=2, padding=1), ReLU(),
              conv2d(rng, 3, 4, k=3, stride=1, padding=1), ReLU(), Flatten(),
              dense(rng, 4 * ((size + 1) // 2) ** 2, 8), ReLU(), dense(rng, 8, classes, init="glorot")]
    net = Network(layers, (1, size, size))
    for l in net.layers:
        if l.has_params:
            l.bias = rng.normal(0, 0.1, l.bias.shape).astype(l.bias.dtype)
    return net.astype(dtype)




def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def relu_margin(net, x):
    """Smallest |pre-activation| feeding any ReLU; finite differences are only valid away from 0."""
    tr = net.trace(x)
    margins = [np.abs(tr.outputs[i - 1]).min() for i, l in enumerate(net.layers) if l.kind == "relu" and i > 0]
    return min(margins) if margins else np.inf


def kink_free_instance(seed, margin=1e-2, classes=3):
    """(net, x, y) from the first derived seed whose ReLU inputs all stay ``margin`` away from 0."""
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        net = small_net(int(rng.integers(2**31)), classes=classes)
        x = rng.random((2, 1, 6, 6))
        if relu_margin(net, x) > margin:
            return net, x, rng.integers(1, classes + 1, size=2)
    raise RuntimeError("no kink-free instance found")


CRITERIA = []


def record(number, ok, detail):
    """Log one acceptance line for the terminal summary and return ``ok``."""
    CRITERIA.append((number, bool(ok), detail))
    return ok
