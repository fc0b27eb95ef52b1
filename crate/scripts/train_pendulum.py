"""Fits a small ReLU network to clamp(K x, -4, 4) on the pendulum domain.

Writes the layers as JSON (row-major weights) to stdout. The output bias is
shifted afterwards so that the network maps the origin to zero.
"""
import json
import sys

import numpy as np
import torch

K = np.array([-19.737606153728677, -6.309106129385725])
U_MAX = 4.0
LO = np.array([-0.2, -1.5])
HI = np.array([0.2, 1.5])


def main(width=8, seed=0, epochs=4000):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(LO, HI, size=(4000, 2))
    y = np.clip(x @ K, -U_MAX, U_MAX)[:, None]
    xt = torch.tensor(x, dtype=torch.float64)
    yt = torch.tensor(y, dtype=torch.float64)
    net = torch.nn.Sequential(
        torch.nn.Linear(2, width),
        torch.nn.ReLU(),
        torch.nn.Linear(width, width),
        torch.nn.ReLU(),
        torch.nn.Linear(width, 1),
    ).double()
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=1000, gamma=0.3)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.mean((net(xt) - yt) ** 2)
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        net[4].bias -= net(torch.zeros(1, 2, dtype=torch.float64))[0]
        rmse = torch.sqrt(torch.mean((net(xt) - yt) ** 2)).item()
    layers = []
    for lin in (net[0], net[2], net[4]):
        layers.append({"W": lin.weight.detach().numpy().tolist(), "b": lin.bias.detach().numpy().tolist()})
    print(f"rmse {rmse:.4f}", file=sys.stderr)
    json.dump({"layers": layers}, sys.stdout, indent=1)


if __name__ == "__main__":
    main()
