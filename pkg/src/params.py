"""
Container for all learnable weights of a reranker.

ModelParams plays the role of a repository of named tensors: the encoder
and decoder read their weights through it, the optimizer produces a new
container after every step, and checkpoints serialize it by name.
"""

from collections import OrderedDict

import numpy as np

from typing import Dict, Iterator, List, Tuple

from .config import DecoderConfig, EncoderConfig, TrainConfig
from .decoder import DecoderParams, init_decoder_tensors
from .encoder import EncoderParams, init_encoder_tensors
from .numerics import DimensionError, Tensor, index, reshape


class ModelParams(object):
    """Named, immutable tensors of one encoder-decoder reranker."""

    def __init__(self, encoder_config, decoder_config, tensors):
        # type: (EncoderConfig, DecoderConfig, Dict[str, Tensor]) -> None
        """
        Initialize a parameter container.

        Args:
            encoder_config: Encoder shape.
            decoder_config: Decoder shape.
            tensors: Tensors by name, in a stable order.
        """
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self._tensors = OrderedDict(tensors)

    @classmethod
    def initialize(cls, encoder_config, decoder_config, seed=0, init_std=0.02):
        # type: (EncoderConfig, DecoderConfig, int, float) -> ModelParams
        """
        Draw fresh weights from a seeded normal distribution.

        Args:
            encoder_config: Encoder shape.
            decoder_config: Decoder shape; its width must equal the encoder's.
            seed: Seed of the numpy generator.
            init_std: Standard deviation of every weight matrix.
        """
        if encoder_config.d != decoder_config.d:
            raise DimensionError("encoder width {} differs from decoder width {}".format(
                encoder_config.d, decoder_config.d
            ))
        rng = np.random.default_rng(seed)
        tensors = OrderedDict()
        tensors.update(init_encoder_tensors(encoder_config, rng, init_std))
        tensors.update(init_decoder_tensors(decoder_config, rng, init_std))
        return cls(encoder_config, decoder_config, tensors)

    @classmethod
    def from_train_config(cls, config):
        # type: (TrainConfig) -> ModelParams
        return cls.initialize(config.encoder_config(), config.decoder_config(),
                              seed=config.seed, init_std=config.init_std)

    @property
    def encoder(self):
        # type: () -> EncoderParams
        return EncoderParams(self.encoder_config, self._tensors)

    @property
    def decoder(self):
        # type: () -> DecoderParams
        return DecoderParams(self.decoder_config, self._tensors)

    def names(self):
        # type: () -> List[str]
        return list(self._tensors)

    def items(self):
        # type: () -> Iterator[Tuple[str, Tensor]]
        return iter(self._tensors.items())

    def tensors(self):
        # type: () -> List[Tensor]
        return list(self._tensors.values())

    def shapes(self):
        # type: () -> Dict[str, Tuple[int, ...]]
        return OrderedDict((name, t.shape) for name, t in self._tensors.items())

    def __getitem__(self, name):
        # type: (str) -> Tensor
        return self._tensors[name]

    def __contains__(self, name):
        # type: (str) -> bool
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        # type: () -> int
        return len(self._tensors)

    @property
    def parameter_count(self):
        # type: () -> int
        return sum(t.size for t in self._tensors.values())

    def arrays(self):
        # type: () -> Dict[str, np.ndarray]
        """Writable copies of every tensor's values."""
        return OrderedDict((name, t.numpy()) for name, t in self._tensors.items())

    def with_arrays(self, arrays):
        # type: (Dict[str, np.ndarray]) -> ModelParams
        """
        New container holding the given values as trainable leaves.

        Raises:
            DimensionError: If a name is missing or a shape differs.
        """
        tensors = OrderedDict()
        for name, current in self._tensors.items():
            if name not in arrays:
                raise DimensionError("missing tensor '{}'".format(name))
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != current.shape:
                raise DimensionError("tensor '{}' has shape {}, expected {}".format(
                    name, value.shape, current.shape
                ))
            tensors[name] = Tensor(value, requires_grad=True)
        return ModelParams(self.encoder_config, self.decoder_config, tensors)

    def flatten(self):
        # type: () -> np.ndarray
        """All values concatenated in name order."""
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def unflatten(self, theta):
        # type: (Tensor) -> ModelParams
        """
        Container whose tensors are differentiable slices of theta.

        Gradients of anything computed from the result flow back to theta,
        which is how a whole model is put under one gradient check.
        """
        if theta.shape != (self.parameter_count,):
            raise DimensionError("flat vector of shape {} does not match {} parameters".format(
                theta.shape, self.parameter_count
            ))
        tensors = OrderedDict()
        offset = 0
        for name, current in self._tensors.items():
            size = current.size
            tensors[name] = reshape(index(theta, slice(offset, offset + size)), current.shape)
            offset += size
        return ModelParams(self.encoder_config, self.decoder_config, tensors)

    def equals(self, other):
        # type: (ModelParams) -> bool
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(self[name].data, other[name].data) for name in self.names()
        )

    def __repr__(self):
        # type: () -> str
        return "ModelParams({} tensors, {} parameters)".format(len(self), self.parameter_count)
