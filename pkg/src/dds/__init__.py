"""Discrete diffusion skills: offline hierarchical RL at desk scale.

Layers, bottom up: `tensor` (reverse-mode autodiff on numpy), `nn`/`optim`
(modules and Adam), `diffusion` (VP schedule and conditional sampler),
`skills` (trajectory encoder, vector-quantized codebook, diffusion
decoder), `relabel` (H-step skill dataset), `iql` (expectile value
learning and AWR policy extraction), `envs`/`datastore` (point maze,
chain, binary formats), `pipeline`/`cli` (stages and subcommands).
"""

__version__ = "0.1.0"
