import torch
import torch.nn as nn

# ### KF:BEGIN reference
# KF-MOCK: time_ms=1.2 time_ms@lnl=1.0
class Model(nn.Module):
    def forward(self, a, b):
        return torch.relu(a + b) * 0.5
# ### KF:END reference


def get_inputs():
    return [torch.rand(4096, 4096), torch.rand(4096, 4096)]
