"""Train the LeNet-5 fixture on MNIST and export it in the manifest + blob format.

Needs torch (pip install torch). Run from the repository root:

    python3 tools/train_lenet.py --data /path/to/mnist --out fixtures/lenet5

The exported accuracy is measured with the package's float64 reference
engine on the 10k test images.
"""
import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from torch import nn

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cordic_rpe.cordic import mac_directions  # noqa: E402
from cordic_rpe.fxp import FxpFormat  # noqa: E402
from cordic_rpe.netrun import Model, ModelLayer, infer, load_mnist, load_model, save_model  # noqa: E402
from cordic_rpe.rpe import AfKind, RpeConfig  # noqa: E402
from cordic_rpe.sycore import LayerKind, LayerSpec  # noqa: E402


class FixedPointSim:
    """Bit-exact torch model of the cordic engine's MAC stream (weights below 2).

    Forward values match the engine; gradients pass straight through to the
    float parameters.
    """

    def __init__(self, fmt: FxpFormat, stages: int):
        self.scale = float(1 << fmt.frac_bits)
        self.lo, self.hi = fmt.min_raw, fmt.max_raw
        self.wmax = (2 << fmt.frac_bits) - 1
        codes = np.arange(-self.wmax, self.wmax + 1)
        digits = mac_directions(codes, stages, fmt.frac_bits)  # (stages, codes)
        self.digits = torch.tensor(digits, dtype=torch.float32)
        self.stages = stages
        # value each weight code actually multiplies by: sum of d_i * 2**-i
        steps = torch.tensor([2.0 ** -i for i in range(stages)]).view(-1, 1)
        self.effective_lut = (self.digits * steps).sum(0)

    def code(self, weight):
        return torch.clamp(torch.floor(weight.detach() * self.scale), -self.wmax, self.wmax).long()

    def effective(self, weight):
        """Weight as the rotation realizes it, with a straight-through gradient."""
        eff = self.effective_lut[self.code(weight) + self.wmax]
        return weight + (eff - weight).detach()

    def act(self, v):
        q = torch.clamp(torch.floor(v * self.scale), self.lo, self.hi) / self.scale
        return v + (q - v).detach()

    def linear(self, x, weight, bias, op):
        """op(x, w) is conv2d or linear; x is already on the fixed-point grid."""
        s = self.scale
        code = self.code(weight)
        xr = torch.round(x.detach() * s)
        b = torch.clamp(torch.floor(bias.detach() * s), self.lo, self.hi)
        acc = b.view(1, -1, *([1] * (x.dim() - 2)))
        for i in range(self.stages):
            d = self.digits[i][code + self.wmax]
            acc = acc + op(torch.floor(xr / (1 << i)), d)
        exact = torch.clamp(acc, self.lo, self.hi) / s
        surrogate = op(x, self.effective(weight)) + bias.view(1, -1, *([1] * (x.dim() - 2)))
        surrogate = torch.clamp(surrogate, self.lo / s, self.hi / s)
        return surrogate + (exact - surrogate).detach()


class LeNet5(nn.Module):
    def __init__(self):
        super().__init__()
        self.sim = None
        self.effective = None  # FixedPointSim whose weight grid the float pass uses
        self.conv1 = nn.Conv2d(1, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(400, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 10)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        if self.sim is not None:
            return self.fixed_forward(x)
        return self.float_forward(x)

    def _w(self, m):
        return m.weight if self.effective is None else self.effective.effective(m.weight)

    def float_forward(self, x):
        f = nn.functional
        x = self.pool(torch.relu(f.conv2d(x, self._w(self.conv1), self.conv1.bias, padding=2)))
        x = self.pool(torch.relu(f.conv2d(x, self._w(self.conv2), self.conv2.bias)))
        x = x.flatten(1)
        x = torch.relu(f.linear(x, self._w(self.fc1), self.fc1.bias))
        x = torch.relu(f.linear(x, self._w(self.fc2), self.fc2.bias))
        return f.linear(x, self._w(self.fc3), self.fc3.bias)

    def fixed_forward(self, x):
        sim = self.sim
        conv1 = lambda a, w: nn.functional.conv2d(a, w, padding=2)  # noqa: E731
        conv2 = lambda a, w: nn.functional.conv2d(a, w)  # noqa: E731
        fc = nn.functional.linear
        x = sim.act(x)
        x = self.pool(torch.relu(sim.linear(x, self.conv1.weight, self.conv1.bias, conv1)))
        x = self.pool(torch.relu(sim.linear(x, self.conv2.weight, self.conv2.bias, conv2)))
        x = x.flatten(1)
        x = torch.relu(sim.linear(x, self.fc1.weight, self.fc1.bias, fc))
        x = torch.relu(sim.linear(x, self.fc2.weight, self.fc2.bias, fc))
        return sim.linear(x, self.fc3.weight, self.fc3.bias, fc)


def to_model(net: LeNet5) -> Model:
    def t(p, weight=False):
        if weight and net.effective is not None:
            p = net.effective.effective(p)
        return p.detach().double().numpy().copy()

    specs = [
        (LayerSpec("conv1", LayerKind.CONV, k=5, cin=1, cout=6, h=28, w=28, pad=2, af=AfKind.RELU), net.conv1),
        (LayerSpec("pool1", LayerKind.POOL, k=2, cin=6, cout=6, h=28, w=28, stride=2), None),
        (LayerSpec("conv2", LayerKind.CONV, k=5, cin=6, cout=16, h=14, w=14, af=AfKind.RELU), net.conv2),
        (LayerSpec("pool2", LayerKind.POOL, k=2, cin=16, cout=16, h=10, w=10, stride=2), None),
        (LayerSpec("flatten", LayerKind.FLATTEN, cin=16, cout=16, h=5, w=5), None),
        (LayerSpec("fc1", LayerKind.FC, cin=400, cout=120, af=AfKind.RELU), net.fc1),
        (LayerSpec("fc2", LayerKind.FC, cin=120, cout=84, af=AfKind.RELU), net.fc2),
        (LayerSpec("fc3", LayerKind.FC, cin=84, cout=10), net.fc3),
    ]
    layers = [ModelLayer(s, t(m.weight, True), t(m.bias)) if m is not None else ModelLayer(s)
              for s, m in specs]
    return Model("lenet5", (1, 28, 28), layers)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True, help="directory with the four MNIST IDX files")
    ap.add_argument("--out", default="fixtures/lenet5")
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--qat-epochs", type=int, default=3,
                    help="fine-tuning epochs against the fixed-point engine")
    ap.add_argument("--format", default="Q8.4")
    ap.add_argument("--stages", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--init", help="start from this float manifest instead of training from scratch")
    ap.add_argument("--qat-lr", type=float, default=1e-3)
    ap.add_argument("--l1", type=float, default=0.0, help="per-layer mean L1 penalty on realized weights during QAT")
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    data = Path(args.data)
    xtr, ytr = load_mnist(data / "train-images-idx3-ubyte", data / "train-labels-idx1-ubyte")
    xte, yte = load_mnist(data / "t10k-images-idx3-ubyte", data / "t10k-labels-idx1-ubyte")
    xt = torch.tensor(xtr, dtype=torch.float32).unsqueeze(1)
    yt = torch.tensor(ytr)

    net = LeNet5()

    def run_epochs(epochs, lr, engine, cfg=None):
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
        for epoch in range(epochs):
            net.train()
            perm = torch.randperm(len(xt), generator=gen)
            for i in range(0, len(xt), 128):
                idx = perm[i:i + 128]
                loss = nn.functional.cross_entropy(net(xt[idx]), yt[idx])
                if net.sim is not None:
                    # keep the float pass on the same weight grid accurate too
                    loss = loss + nn.functional.cross_entropy(net.float_forward(xt[idx]), yt[idx])
                    if args.l1:
                        # pull unimportant weights to exactly zero so magnitude pruning is cheap;
                        # a per-layer mean keeps small layers from being ignored
                        loss = loss + args.l1 * sum(net._w(m).abs().mean() for m in
                                                    (net.conv1, net.conv2, net.fc1, net.fc2, net.fc3))
                opt.zero_grad()
                loss.backward()
                opt.step()
                if net.sim is not None:
                    with torch.no_grad():
                        for m in (net.conv1, net.conv2, net.fc1, net.fc2, net.fc3):
                            m.weight.clamp_(-1.99, 1.99)
            sched.step()
            model = to_model(net)
            _, rep = infer(model, xte, yte, engine=engine, cfg=cfg)
            line = f"{engine} epoch {epoch + 1}: loss {loss.item():.4f} test top1 {rep.accuracy:.4f}"
            if engine != "reference":
                _, ref = infer(model, xte, yte, engine="reference")
                line += f" reference {ref.accuracy:.4f}"
            print(line, flush=True)

    gen = torch.Generator().manual_seed(args.seed)
    if args.init:
        init = load_model(args.init)
        for layer in init.layers:
            if layer.weight is not None:
                m = getattr(net, layer.spec.name)
                m.weight.data = torch.tensor(layer.weight, dtype=torch.float32)
                m.bias.data = torch.tensor(layer.bias, dtype=torch.float32)
    else:
        run_epochs(args.epochs, 1e-3, "reference")
    if args.qat_epochs:
        fmt = FxpFormat.parse(args.format)
        net.sim = net.effective = FixedPointSim(fmt, args.stages)
        run_epochs(args.qat_epochs, args.qat_lr, "cordic", RpeConfig(fmt=fmt, mac_stages=args.stages))
        net.sim = None

    model = to_model(net)
    _, rep = infer(model, xte, yte, engine="reference")
    model.meta.update({"dataset": "MNIST t10k", "float_accuracy": rep.accuracy,
                       "train": {"epochs": 0 if args.init else args.epochs, "qat_epochs": args.qat_epochs,
                                 "qat_format": args.format, "qat_stages": args.stages,
                                 "seed": args.seed, "optimizer": "adam", "l1": args.l1}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "manifest.json", "lenet5.bin")
    print(f"saved {out / 'manifest.json'} float top1 {rep.accuracy:.4f}")


if __name__ == "__main__":
    np.seterr(all="raise")
    main()
