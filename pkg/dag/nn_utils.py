import contextlib
import hashlib
import math

import torch
import torch.nn as nn


@contextlib.contextmanager
def seeded(seed: int):
    """Run module construction under a fixed torch seed without touching the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def freeze(module: nn.Module) -> nn.Module:
    for parameter in module.parameters():
        parameter.requires_grad_(False)
    module.eval()
    return module


def is_frozen(module: nn.Module) -> bool:
    return all(not parameter.requires_grad for parameter in module.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_trainable(module: nn.Module) -> int:
    return sum(parameter.numel() for parameter in module.parameters() if parameter.requires_grad)


def sinusoidal_position_2d(height: int, width: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine/cosine encodings, ``(height * width, dim)`` in row-major order.

    Half of the channels encode the row, half the column; ``dim`` must be a multiple of 4.
    """
    if dim % 4 != 0:
        raise ValueError(f"positional width {dim} must be a multiple of 4")
    quarter = dim // 4
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    rows = torch.arange(height, dtype=torch.float64)[:, None] * frequencies
    cols = torch.arange(width, dtype=torch.float64)[:, None] * frequencies
    row_code = torch.cat([rows.sin(), rows.cos()], dim=1)[:, None, :].expand(height, width, 2 * quarter)
    col_code = torch.cat([cols.sin(), cols.cos()], dim=1)[None, :, :].expand(height, width, 2 * quarter)
    return torch.cat([row_code, col_code], dim=-1).reshape(height * width, dim).to(torch.float32)
