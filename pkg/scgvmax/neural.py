""" The fusion network: a CNN over scalogram images joined with an MLP over demographics.

    Five convolutional blocks (3x3 'same' convolution, ReLU, batch normalisation, 2x2 max
    pooling) feed two dense layers of 64 and 4 units. The demographics (weight, height, age,
    sex) pass through dense layers of 16 and 4 units. The two 4-node outputs are concatenated
    and mapped either to a single linear node (V_max regression) or to four softmax
    probabilities (valve classification).

    Everything runs in double precision on the CPU. Gradients come from torch autograd and
    training uses Adam; with a fixed seed the whole run is bitwise reproducible.
"""

import dataclasses
import json
import logging
import math
import struct
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch
from torch import nn

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SCGM'
DTYPE = torch.float64
TASKS = ('vmax', 'valve')
N_CLASSES = 4
N_DEMOGRAPHICS = 4
VMAX_GUARD = 0.1
PROB_CLIP = 1e-7
DEMOGRAPHIC_CLAMP = (-0.5, 1.5)


class NonFiniteActivationException(ArithmeticError):
    """ Thrown if a layer produces NaN or infinite activations. """
    def __init__(self, layer):
        self.layer = layer
        super().__init__()

    def __str__(self):
        return f"non-finite activation after layer {self.layer}"

class DivergenceException(RuntimeError):
    """ Thrown if the training loss, or an activation feeding it, stops being finite. """
    def __init__(self, epoch, loss, layer=None):
        self.epoch = epoch
        self.loss = loss
        self.layer = layer
        super().__init__()

    def __str__(self):
        where = f", non-finite activation after layer {self.layer}" if self.layer else ''
        return f"training diverged in epoch {self.epoch} (loss {self.loss}{where})"

class LabelException(ValueError):
    pass

class CheckpointFormatException(ValueError):
    def __init__(self, path, detail):
        self.path = path
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"{self.path}: {self.detail}"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    task: str = 'vmax'
    filters: tuple = (8, 16, 32, 32, 32)
    kernel_size: int = 3
    dense_widths: tuple = (64, 4)
    mlp_widths: tuple = (16, 4)
    dropout: float = 0.3
    img_size: int = 256
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 150
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'filters', tuple(int(f) for f in self.filters))
        object.__setattr__(self, 'dense_widths', tuple(int(w) for w in self.dense_widths))
        object.__setattr__(self, 'mlp_widths', tuple(int(w) for w in self.mlp_widths))
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.filters or min(self.filters) <= 0:
            raise ValueError(f"filter counts must be positive, got {self.filters}")
        if len(self.dense_widths) != 2 or len(self.mlp_widths) != 2 or min(self.dense_widths + self.mlp_widths) <= 0:
            raise ValueError("dense and MLP stacks need two positive widths each")
        if self.dense_widths[-1] != self.mlp_widths[-1]:
            raise ValueError("the CNN and MLP branches must end in the same width")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout rate must lie in [0,1), got {self.dropout}")
        if self.batch_size < 2:
            raise ValueError(f"batch normalisation needs batches of at least 2, got batch_size={self.batch_size}")
        if self.img_size < 2 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("image size, epochs and learning rate are out of range")

    @property
    def n_outputs(self):
        return 1 if self.task == 'vmax' else N_CLASSES

    def pooled_side(self, side=None):
        """ Spatial side after every pooling stage (pools round up, so any size works). """
        side = self.img_size if side is None else side
        for _ in self.filters:
            side = math.ceil(side/2)
        return side


##############################################
###
### Demographics
###
##############################################


@dataclasses.dataclass
class DemographicScaler:
    """ Min-max scaling of weight, height and age with training-set extrema; sex passes through. """
    lo: np.ndarray = None
    hi: np.ndarray = None

    def fit(self, demos):
        demos = np.asarray(demos, dtype=float)
        self.lo = demos[:, :3].min(axis=0)
        self.hi = demos[:, :3].max(axis=0)
        return self

    def transform(self, demos):
        if self.lo is None:
            raise RuntimeError("DemographicScaler.transform called before fit")
        demos = np.asarray(demos, dtype=float)
        if not np.all(np.isin(demos[:, 3], (0, 1))):
            raise LabelException("sex must be encoded as 1 (female) or 0 (male)")
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        scaled = np.clip((demos[:, :3] - self.lo)/span, *DEMOGRAPHIC_CLAMP)
        return np.column_stack([scaled, demos[:, 3]])

    def fit_transform(self, demos):
        return self.fit(demos).transform(demos)

    def to_dict(self):
        return {'lo': list(map(float, self.lo)), 'hi': list(map(float, self.hi))}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d['lo'], dtype=float), np.asarray(d['hi'], dtype=float))


def prepare_images(images):
    """ Scale every image to unit peak; all-zero images stay zero. """
    images = np.asarray(images, dtype=float)
    peak = images.reshape(len(images), -1).max(axis=1)
    peak = np.where(peak > 0, peak, 1.0)
    return images/peak[:, None, None]

def one_hot(codes, n_classes=N_CLASSES):
    codes = np.asarray(codes, dtype=np.int64)
    if np.any((codes < 0) | (codes >= n_classes)):
        raise LabelException(f"class codes must lie in [0, {n_classes})")
    return np.eye(n_classes)[codes]


##############################################
###
### Network
###
##############################################


class FusionModel(nn.Module):
    """ CNN branch over (B, H, W) images, MLP branch over (B, 4) demographics, fused head. """

    def __init__(self, config):
        super().__init__()
        self.config = config
        k = config.kernel_size
        blocks = []
        channels = 1
        for f in config.filters:
            blocks.append(nn.Sequential(nn.Conv2d(channels, f, k, stride=1, padding='same'), nn.ReLU(),
                                        nn.BatchNorm2d(f), nn.MaxPool2d(2, ceil_mode=True)))
            channels = f
        self.conv = nn.Sequential(*blocks)
        flat = config.pooled_side()**2*config.filters[-1]
        d1, d2 = config.dense_widths
        self.cnn_dense = nn.Sequential(nn.Flatten(), nn.Linear(flat, d1), nn.ReLU(), nn.BatchNorm1d(d1),
                                       nn.Dropout(config.dropout), nn.Linear(d1, d2), nn.ReLU())
        m1, m2 = config.mlp_widths
        self.mlp = nn.Sequential(nn.Linear(N_DEMOGRAPHICS, m1), nn.ReLU(), nn.Linear(m1, m2), nn.ReLU())
        self.head = nn.Linear(d2 + m2, config.n_outputs)
        self.to(DTYPE)
        self.reset_parameters()

    def reset_parameters(self):
        for name, module in self.named_modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                if module is self.head:
                    nn.init.xavier_uniform_(module.weight)
                else:
                    nn.init.kaiming_uniform_(module.weight, nonlinearity='relu')
                nn.init.zeros_(module.bias)

    def _run(self, stage, x, prefix):
        for name, layer in stage.named_children():
            x = layer(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivationException(f"{prefix}.{name}")
        return x

    def forward(self, images, demos):
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[0] != demos.shape[0]:
            raise ValueError(f"batch sizes differ: {images.shape[0]} images, {demos.shape[0]} demographic rows")
        if demos.shape[1] != N_DEMOGRAPHICS:
            raise ValueError(f"demographic rows need {N_DEMOGRAPHICS} entries, got {demos.shape[1]}")
        x = images
        for i, block in enumerate(self.conv):
            x = self._run(block, x, f"conv.{i}")
        x = self._run(self.cnn_dense, x, "cnn_dense")
        z = self._run(self.mlp, demos, "mlp")
        out = self.head(torch.cat([x, z], dim=1))
        if not torch.isfinite(out).all():
            raise NonFiniteActivationException("head")
        if self.config.task == 'valve':
            return torch.softmax(out, dim=1)
        return out


def parameter_count(config):
    return sum(p.numel() for p in FusionModel(config).parameters())

def build_model(config):
    """ Fresh model whose initial weights depend only on `config.seed`. """
    torch.manual_seed(config.seed)
    return FusionModel(config)

def _tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)

def forward(model, images, demos, mode='eval'):
    """ Run the model in 'train' (batch statistics, dropout) or 'eval' mode. """
    if mode not in ('train', 'eval'):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == 'train')
    return model(_tensor(images), _tensor(demos))


##############################################
###
### Losses and gradients
###
##############################################


def loss_mpe(pred, true):
    """ Mean absolute percentage error, 100 |pred - true| / true averaged over the batch. """
    pred = torch.as_tensor(pred, dtype=DTYPE).reshape(-1)
    true = torch.as_tensor(true, dtype=DTYPE).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"prediction and target sizes differ: {tuple(pred.shape)} vs {tuple(true.shape)}")
    if torch.any(true < VMAX_GUARD):
        raise LabelException(f"true velocities must be at least {VMAX_GUARD} m/s")
    return torch.mean(100*torch.abs(pred - true)/true)

def loss_cce(probs, labels):
    """ Categorical cross-entropy of probability rows against one-hot labels. """
    probs = torch.as_tensor(probs, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=DTYPE)
    if labels.shape != probs.shape:
        raise LabelException(f"labels of shape {tuple(labels.shape)} do not match probabilities {tuple(probs.shape)}")
    if not (torch.all((labels == 0) | (labels == 1)) and torch.all(labels.sum(dim=1) == 1)):
        raise LabelException("labels must be one-hot rows")
    p = torch.clamp(probs, PROB_CLIP, 1 - PROB_CLIP)
    return torch.mean(-torch.sum(labels*torch.log(p), dim=1))

def task_loss(config, outputs, targets):
    if config.task == 'vmax':
        return loss_mpe(outputs, targets)
    return loss_cce(outputs, targets)

def _targets(config, targets):
    if config.task == 'vmax':
        return _tensor(targets).reshape(-1, 1)
    return _tensor(one_hot(targets))

def backward(model, images, demos, targets, seed=None):
    """ Train-mode loss and its gradient for every parameter, as a name -> tensor dict.

        With `seed` the dropout masks are reproducible, so repeated calls differentiate the
        same function (needed for finite-difference checks).
    """
    if seed is not None:
        torch.manual_seed(seed)
    model.zero_grad()
    loss = task_loss(model.config, forward(model, images, demos, 'train'), _targets(model.config, targets))
    loss.backward()
    return float(loss), {name: p.grad.detach().clone() for name, p in model.named_parameters()}


##############################################
###
### Training
###
##############################################


class Samples(NamedTuple):
    """ Images (n, H, W), scaled demographics (n, 4) and targets (V_max or class codes). """
    images: np.ndarray
    demos: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.images)


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    batches = list(torch.split(order, batch_size))
    # Batch normalisation needs two samples per batch.
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = torch.cat([batches[-2], batches.pop()])
    return batches

def evaluate(model, samples):
    if len(samples) == 0:
        return math.nan
    with torch.no_grad():
        outputs = forward(model, samples.images, samples.demos, 'eval')
        return float(task_loss(model.config, outputs, _targets(model.config, samples.targets)))

def train(config, train_set, valid_set=None, model=None):
    """ Train for exactly `config.epochs` epochs with Adam (β1=0.9, β2=0.999, ε=1e-8).

        Returns the trained model and a DataFrame with the per-epoch training loss (train
        mode, averaged over samples) and validation loss (eval mode).
    """
    if len(train_set) < 2:
        raise ValueError(f"training needs at least two samples, got {len(train_set)}")
    torch.use_deterministic_algorithms(True)
    model = build_model(config) if model is None else model
    generator = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    images, demos = _tensor(train_set.images), _tensor(train_set.demos)
    targets = _targets(config, train_set.targets)
    history = []
    for epoch in range(config.epochs):
        model.train()
        total = 0.0
        for idx in _batches(len(train_set), config.batch_size, generator):
            optimizer.zero_grad()
            try:
                loss = task_loss(config, model(images[idx], demos[idx]), targets[idx])
            except NonFiniteActivationException as e:
                raise DivergenceException(epoch, math.nan, e.layer) from e
            if not torch.isfinite(loss):
                raise DivergenceException(epoch, float(loss))
            loss.backward()
            optimizer.step()
            total += float(loss)*len(idx)
        train_loss = total/len(train_set)
        valid_loss = evaluate(model, valid_set) if valid_set is not None else math.nan
        history.append((epoch, train_loss, valid_loss))
        logger.debug("epoch %d: train %.6g, valid %.6g", epoch, train_loss, valid_loss)
    logger.info("trained %s model for %d epochs (final train loss %.4g)", config.task, config.epochs,
                history[-1][1] if history else math.nan)
    return model, pd.DataFrame.from_records(history, columns=['epoch', 'train_loss', 'valid_loss'])

def predict(model, images, demos, batch_size=32):
    """ Eval-mode outputs: V_max per sample, or (n, 4) class probabilities. """
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            stop = start + batch_size
            outputs.append(model(_tensor(images[start:stop]), _tensor(demos[start:stop])).numpy())
    out = np.concatenate(outputs) if outputs else np.zeros((0, model.config.n_outputs))
    return out[:, 0] if model.config.task == 'vmax' else out


##############################################
###
### Checkpoints
###
##############################################


def save_checkpoint(model, path, scaler=None):
    """ `SCGM`, u32 LE header length, JSON header, then every state tensor as LE float64 in declaration order. """
    state = model.state_dict()
    header = {'config': dataclasses.asdict(model.config),
              'scaler': scaler.to_dict() if scaler is not None else None,
              'tensors': [[name, list(t.shape)] for name, t in state.items()]}
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(blob)))
        f.write(blob)
        for t in state.values():
            f.write(np.ascontiguousarray(t.detach().numpy(), dtype='<f8').tobytes())

def load_checkpoint(path):
    """ Returns (model, scaler or None). """
    with open(path, 'rb') as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointFormatException(path, "not a model checkpoint")
        (n,) = struct.unpack('<I', f.read(4))
        header = json.loads(f.read(n).decode('utf-8'))
        payload = f.read()
    model = FusionModel(ModelConfig(**header['config']))
    state = model.state_dict()
    offset = 0
    for name, shape in header['tensors']:
        if name not in state:
            raise CheckpointFormatException(path, f"unexpected tensor {name}")
        count = int(np.prod(shape))
        values = np.frombuffer(payload, dtype='<f8', count=count, offset=offset).reshape(shape)
        state[name] = torch.as_tensor(values.copy()).to(state[name].dtype)
        offset += 8*count
    if offset != len(payload):
        raise CheckpointFormatException(path, f"{len(payload) - offset} trailing bytes")
    model.load_state_dict(state)
    scaler = DemographicScaler.from_dict(header['scaler']) if header['scaler'] else None
    return model, scaler
