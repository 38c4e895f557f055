from .checkpoint import load_checkpoint, save_checkpoint
from .config import format_config, parse_config, read_config_file, write_config_file
from .idx import read_idx
from .pnm import read_pnm, write_pnm

__all__ = [
    "load_checkpoint", "save_checkpoint",
    "format_config", "parse_config", "read_config_file", "write_config_file",
    "read_idx", "read_pnm", "write_pnm",
]
