"""Shared finite-difference cases: op and a factory for its float64 inputs."""

import numpy as np

from fadsr import tensor as T


def _rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-9) * 0.1, x)
    return x


def _positive(rng, *shape):
    return rng.uniform(0.2, 2.0, shape)


GRAD_CASES = {
    "conv3x3_bias": (lambda x, w, b: T.conv2d(x, w, b), lambda r: [_rand(r, 2, 3, 4, 5), _rand(r, 2, 3, 3, 3), _rand(r, 2)]),
    "conv1x1": (lambda x, w: T.conv2d(x, w), lambda r: [_rand(r, 1, 4, 3, 3), _rand(r, 3, 4, 1, 1)]),
    "add": (T.add, lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 1, 2, 3, 3)]),
    "add_per_channel": (T.add, lambda r: [_rand(r, 2, 2, 3, 3), _rand(r, 1, 2, 1, 1)]),
    "sub_per_position": (T.sub, lambda r: [_rand(r, 2, 2, 3, 3), _rand(r, 2, 1, 3, 3)]),
    "mul": (T.mul, lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 1, 2, 3, 3)]),
    "mul_per_channel": (T.mul, lambda r: [_rand(r, 2, 3, 2, 2), _rand(r, 2, 3, 1, 1)]),
    "scale": (lambda x: T.scale(x, -1.7), lambda r: [_rand(r, 1, 2, 3, 3)]),
    "relu": (T.relu, lambda r: [_rand(r, 1, 2, 3, 3, away_from_zero=True)]),
    "sigmoid": (T.sigmoid, lambda r: [_rand(r, 1, 2, 3, 3)]),
    "absolute": (T.absolute, lambda r: [_rand(r, 1, 2, 3, 3, away_from_zero=True)]),
    "square": (T.square, lambda r: [_rand(r, 1, 2, 3, 3)]),
    "log": (T.log, lambda r: [_positive(r, 1, 2, 3, 3)]),
    "sum_all": (T.sum_all, lambda r: [_rand(r, 1, 2, 3, 3)]),
    "mean_all": (T.mean_all, lambda r: [_rand(r, 1, 2, 3, 3)]),
    "global_avg_pool": (T.global_avg_pool, lambda r: [_rand(r, 2, 3, 3, 4)]),
    "pixel_shuffle": (lambda x: T.pixel_shuffle(x, 2), lambda r: [_rand(r, 1, 8, 2, 3)]),
    "pixel_unshuffle": (lambda x: T.pixel_unshuffle(x, 2), lambda r: [_rand(r, 1, 2, 4, 6)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 1, 3, 3, 3)]),
    "channel_slice": (lambda x: T.channel_slice(x, 1, 3), lambda r: [_rand(r, 1, 4, 3, 3)]),
    "softmax": (lambda x: T.softmax(x, axis=1), lambda r: [_rand(r, 2, 3, 2, 2)]),
    "masked_sum": (lambda m, a, b: T.masked_sum(m, [a, b]),
                   lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 1, 4, 3, 3), _rand(r, 1, 4, 3, 3)]),
    "take_labels": (lambda p: T.take_labels(p, np.array([[[0, 1, 2], [2, 1, 0]]])),
                    lambda r: [_rand(r, 1, 3, 2, 3)]),
    "channel_dot": (lambda x: T.channel_dot(x, np.array([1.0, 2.5, -0.5])), lambda r: [_rand(r, 2, 3, 2, 2)]),
}
