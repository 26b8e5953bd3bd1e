import numpy as np
import pytest

from errsim.graph import Graph, OperatorNode


def _he(rng, *shape, scale=0.5):
    fan_in = int(np.prod(shape[1:])) or 1
    return (rng.standard_normal(shape) * scale / np.sqrt(fan_in)).astype(np.float32)


def build_lenet(seed=0):
    """LeNet-5-style classifier: two conv stages, three dense layers,
    softmax head. Input (1, 28, 28), output (1, 10). 13 nodes."""
    rng = np.random.default_rng(seed)
    nodes = [
        OperatorNode("conv1", "Conv2D",
                     {"kernel": 5, "stride": 1, "padding": 2, "out_channels": 6},
                     {"filter": _he(rng, 6, 1, 5, 5)}, ("image",)),
        OperatorNode("act1", "LeakyReLU", {"slope": 0.1}, {}, ("conv1",)),
        OperatorNode("pool1", "MaxPool", {"window": 2, "stride": 2}, {}, ("act1",)),
        OperatorNode("conv2", "Conv2D",
                     {"kernel": 5, "stride": 1, "padding": 0, "out_channels": 16},
                     {"filter": _he(rng, 16, 6, 5, 5)}, ("pool1",)),
        OperatorNode("act2", "LeakyReLU", {"slope": 0.1}, {}, ("conv2",)),
        OperatorNode("pool2", "MaxPool", {"window": 2, "stride": 2}, {}, ("act2",)),
        OperatorNode("flatten", "Flatten", {}, {}, ("pool2",)),
        OperatorNode("fc1", "Dense", {},
                     {"weight": _he(rng, 120, 400), "bias": _he(rng, 120)},
                     ("flatten",)),
        OperatorNode("act3", "LeakyReLU", {"slope": 0.1}, {}, ("fc1",)),
        OperatorNode("fc2", "Dense", {},
                     {"weight": _he(rng, 84, 120), "bias": _he(rng, 84)},
                     ("act3",)),
        OperatorNode("fc3", "Dense", {},
                     {"weight": _he(rng, 10, 84), "bias": _he(rng, 10)},
                     ("fc2",)),
        OperatorNode("softmax", "Softmax", {}, {}, ("fc3",)),
    ]
    return Graph(nodes, {"image": (1, 28, 28)}, ["softmax"])


def build_bench_net(seed=1):
    """Conv-heavy 12-node chain for cache benchmarking. Input (12, 24, 24)."""
    rng = np.random.default_rng(seed)
    c = 20
    nodes = [
        OperatorNode("conv1", "Conv2D",
                     {"kernel": 3, "stride": 1, "padding": 1, "out_channels": c},
                     {"filter": _he(rng, c, 12, 3, 3)}, ("image",)),
        OperatorNode("bn1", "BatchNorm", {"epsilon": 1e-5},
                     {"mean": np.zeros(c, np.float32),
                      "variance": np.ones(c, np.float32),
                      "gamma": np.ones(c, np.float32),
                      "beta": np.zeros(c, np.float32)}, ("conv1",)),
        OperatorNode("act1", "LeakyReLU", {"slope": 0.1}, {}, ("bn1",)),
        OperatorNode("conv2", "Conv2D",
                     {"kernel": 3, "stride": 1, "padding": 1, "out_channels": c},
                     {"filter": _he(rng, c, c, 3, 3)}, ("act1",)),
        OperatorNode("act2", "LeakyReLU", {"slope": 0.1}, {}, ("conv2",)),
        OperatorNode("conv3", "Conv2D",
                     {"kernel": 3, "stride": 2, "padding": 1, "out_channels": 2 * c},
                     {"filter": _he(rng, 2 * c, c, 3, 3)}, ("act2",)),
        OperatorNode("act3", "LeakyReLU", {"slope": 0.1}, {}, ("conv3",)),
        OperatorNode("pool", "MaxPool", {"window": 2, "stride": 2}, {}, ("act3",)),
        OperatorNode("flatten", "Flatten", {}, {}, ("pool",)),
        OperatorNode("fc1", "Dense", {},
                     {"weight": _he(rng, 64, 2 * c * 6 * 6), "bias": _he(rng, 64)},
                     ("flatten",)),
        OperatorNode("fc2", "Dense", {},
                     {"weight": _he(rng, 10, 64), "bias": _he(rng, 10)}, ("fc1",)),
        OperatorNode("softmax", "Softmax", {}, {}, ("fc2",)),
    ]
    return Graph(nodes, {"image": (12, 24, 24)}, ["softmax"])


def build_diamond(seed=2):
    """Two parallel branches joined by an Add; exercises partial
    re-execution."""
    rng = np.random.default_rng(seed)
    nodes = [
        OperatorNode("left", "Conv2D",
                     {"kernel": 1, "stride": 1, "padding": 0, "out_channels": 3},
                     {"filter": _he(rng, 3, 3, 1, 1)}, ("image",)),
        OperatorNode("right", "LeakyReLU", {"slope": 0.1}, {}, ("image",)),
        OperatorNode("join", "Add", {}, {}, ("left", "right")),
        OperatorNode("out", "Sigmoid", {}, {}, ("join",)),
    ]
    return Graph(nodes, {"image": (3, 4, 4)}, ["out"])


@pytest.fixture
def lenet():
    return build_lenet()


@pytest.fixture
def diamond():
    return build_diamond()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
