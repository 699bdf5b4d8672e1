import pytest

from geopipe.costmodel import DeviceProfile, LinkProfile, NetworkGraph
from geopipe.opdag import build_dag


def small_graph_dag():
    """The worked conv/add/linear example graph (8 nodes, 7 FP edges)."""
    return build_dag(
        [
            dict(name="Input", kind="input", attrs={"shape": [3, 8, 8]}),
            dict(
                name="Conv",
                kind="conv2d",
                args=("Input",),
                attrs={
                    "in_channels": 3,
                    "out_channels": 4,
                    "kernel_size": 3,
                    "out_h": 6,
                    "out_w": 6,
                },
            ),
            dict(name="TensorA", kind="tensor", attrs={"shape": [4, 6, 6]}),
            dict(name="ReLu", kind="relu", args=("TensorA",), attrs={"size": 144}),
            dict(name="Add", kind="add", args=("ReLu", "Conv"), attrs={"size": 144}),
            dict(
                name="Linear",
                kind="linear",
                args=("Add",),
                attrs={"in_features": 144, "out_features": 5},
            ),
            dict(name="Label", kind="label", attrs={"classes": 5}),
            dict(name="CE", kind="cross_entropy", args=("Linear", "Label"), attrs={"classes": 5}),
        ]
    )


SMALL_GRAPH_PLACEMENT = {
    "Input": "1",
    "Conv": "1",
    "TensorA": "2",
    "ReLu": "2",
    "Label": "3",
    "Add": "3",
    "Linear": "3",
    "CE": "3",
}


@pytest.fixture
def fig_dag():
    return small_graph_dag()


@pytest.fixture
def fig_placement():
    return dict(SMALL_GRAPH_PLACEMENT)


def chain_dag(n_ops, size=1000):
    """input -> op1 -> ... -> opN relu chain with uniform element counts."""
    specs = [dict(name="in", kind="input", attrs={"size": size})]
    prev = "in"
    for i in range(1, n_ops + 1):
        name = f"op{i:02d}"
        specs.append(dict(name=name, kind="relu", args=(prev,), attrs={"size": size}))
        prev = name
    return build_dag(specs)


def uniform_network(n, peak=1e9, alpha=0.0, beta=1e-9, ids=None):
    ids = ids or [f"d{i}" for i in range(n)]
    devices = [DeviceProfile(device_id=i, peak_flops=peak) for i in ids]
    links = {}
    for a in devices:
        for b in devices:
            if a.device_id != b.device_id:
                links[(a.device_id, b.device_id)] = LinkProfile(
                    src=a.device_id, dst=b.device_id, alpha=alpha, beta=beta
                )
    return NetworkGraph(devices=devices, links=links)
