"""
Grey-matter image embeddings.

precomputed: vectors from an external anatomical backbone are passed through
untouched after a length check.
trainable: a small encoder for synthetic volumes, average pooling over a fixed
p x p x p grid followed by a two-layer GELU MLP.
"""
import numpy as np

from services import layers
from services import tensor_engine as te
from services.errors import SchemaError
from services.volume_io import Volume3D


def pool_volume(volume, grid):
    """Mean intensity of each cell of a grid^3 partition, flattened x-major."""
    data = volume.intensities if isinstance(volume, Volume3D) else np.asarray(volume, dtype=np.float64)
    if data.ndim != 3:
        raise SchemaError(f"expected a 3-D volume, got shape {data.shape}")
    if any(n % grid for n in data.shape):
        raise SchemaError(f"volume dims {data.shape} are not divisible by pooling grid {grid}")
    sx, sy, sz = (n // grid for n in data.shape)
    cells = data.reshape(grid, sx, grid, sy, grid, sz).mean(axis=(1, 3, 5))
    return cells.reshape(-1)


class ImageEncoder:

    def __init__(self, cfg, params, rng, volume_shape=None, prefix='img.'):
        self.mode = cfg.image_mode
        self.d_img = cfg.d_img
        self.grid = cfg.pool_grid
        self.prefix = prefix
        self.volume_shape = tuple(volume_shape) if volume_shape is not None else None
        if self.mode == 'trainable':
            if self.volume_shape is None:
                raise SchemaError("trainable image encoder needs the volume shape")
            cells = self.grid ** 3
            layers.init_linear(params, prefix + 'fc1.', cells, cfg.img_hidden, rng)
            layers.init_linear(params, prefix + 'fc2.', cfg.img_hidden, cfg.d_img, rng)

    @property
    def input_dim(self):
        return self.d_img if self.mode == 'precomputed' else self.grid ** 3

    def prepare(self, items):
        """
        Raw per-sample inputs to the encoder's input matrix: embedding vectors
        as-is, volumes pooled to grid cells.
        """
        if self.mode == 'precomputed':
            arr = np.asarray(items, dtype=np.float64)
            arr = arr.reshape(1, -1) if arr.ndim == 1 else arr
            if arr.shape[-1] != self.d_img:
                raise SchemaError(f"image embedding has length {arr.shape[-1]}, model expects {self.d_img}")
            return arr
        if isinstance(items, Volume3D):
            items = [items]
        out = []
        for vol in items:
            if vol.intensities.shape != self.volume_shape:
                raise SchemaError(f"volume dims {vol.intensities.shape} != model {self.volume_shape}")
            out.append(pool_volume(vol, self.grid))
        return np.array(out).reshape(len(out), self.grid ** 3)

    def embed(self, p, inputs):
        """
        (B, d_img) embeddings from a prepared input matrix. Precomputed mode
        returns the input itself; trainable mode records the MLP on the tape
        of p. inputs may be a Tensor so callers can differentiate w.r.t. it.
        """
        if self.mode == 'precomputed':
            return inputs if isinstance(inputs, te.Tensor) else te.constant(inputs)
        hidden = te.gelu(layers.dense(p, self.prefix + 'fc1.', inputs))
        return layers.dense(p, self.prefix + 'fc2.', hidden)
