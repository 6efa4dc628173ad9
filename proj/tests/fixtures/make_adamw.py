"""Reference AdamW trajectory from torch.optim.AdamW in float64."""
import json
import torch

torch.manual_seed(0)
p = torch.nn.Parameter(torch.randn(2, 3, dtype=torch.float64))
init = p.detach().clone()
opt = torch.optim.AdamW([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
grads, values = [], []
for step in range(6):
    g = torch.randn(2, 3, dtype=torch.float64)
    p.grad = g.clone()
    opt.step()
    grads.append(g.flatten().tolist())
    values.append(p.detach().flatten().tolist())
json.dump({"lr": 0.01, "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.01,
           "init": init.flatten().tolist(), "grads": grads, "values": values},
          open("adamw_reference.json", "w"), indent=1)
