"""Two predictions with the same pixel error but different structure.

The shipped test fixture relabels 200 pixels of a view twice: once spread
evenly over the image, once packed into one patch. Plain MSE cannot tell
them apart. The patch loss charges the packed error to every neighboring
patch once it passes the threshold, so it ranks the scattered prediction
as closer.

    python3 demos/02_topological_loss.py
"""

from pathlib import Path

from topocal.loss import loss_config, mse, topo_loss
from topocal.raster import load_map, to_onehot

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    gt, scattered, packed = (to_onehot(load_map(FIXTURES / f"topo_{n}.png")) for n in ("gt", "p1", "p2"))
    top = loss_config("topmse")
    print(f"{'':10s} {'MSE':>10s} {'Top-MSE':>10s}")
    for name, pred in (("scattered", scattered), ("packed", packed)):
        print(f"{name:10s} {mse(pred, gt):10.5f} {topo_loss(pred, gt, top):10.5f}")


if __name__ == "__main__":
    main()
