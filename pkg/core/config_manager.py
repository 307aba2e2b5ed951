"""
Configuration Manager for continual distillation experiments
Strict JSON documents merged over defaults, presets and run-cell expansion
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, replace

from core.dataset import SyntheticDatasetSpec
from core.distillation import CLASS_SCOPES, METHODS as DISTILL_METHODS, PLACEMENTS, DistillConfig
from core.errors import ConfigParseError, ConfigurationError
from core.harness import RunConfig
from core.prompt_pool import METHODS as POOL_METHODS, FULL_SCALE_POOL_PRESETS, POOL_PRESETS
from core.vit import STUDENT_CONFIG, TEACHER_CONFIG, ViTConfig
from utils.validators import FileValidator, InputValidator

logger = logging.getLogger(__name__)

PRESET_SUFFIXES = ("noclassifier",)


def preset_names():
    names = [f"{pool}-{method}" for pool in POOL_METHODS for method in DISTILL_METHODS]
    names += [f"{pool}-kdp-noclassifier" for pool in POOL_METHODS]
    return names


def resolve_preset(name):
    """'coda-kdp' -> ('coda', 'kdp', {}); 'coda-kdp-noclassifier' adds kd_classifier=False"""
    parts = name.split("-")
    if len(parts) not in (2, 3) or parts[0] not in POOL_METHODS or parts[1] not in DISTILL_METHODS:
        raise ConfigParseError(f"unknown preset '{name}'", key="presets")
    overrides = {}
    if len(parts) == 3:
        if parts[1] != "kdp" or parts[2] not in PRESET_SUFFIXES:
            raise ConfigParseError(f"unknown preset '{name}'", key="presets")
        overrides["kd_classifier"] = False
    return parts[0], parts[1], overrides


@dataclass
class Cell:
    """One (seed x method x variant) run of an experiment"""

    run_id: str
    seed: int
    pool: str
    distill: str
    variant: str
    run_config: RunConfig


class ConfigManager:
    def __init__(self):
        self.validator = InputValidator()

        # Default configuration
        self.default_config = {
            # Run grid
            'seeds': [0],
            'pools': ['coda'],
            'distills': ['none', 'kdp'],
            'presets': [],
            'tasks': 5,
            'epochs': 5,
            'batch_size': 32,
            'learning_rate': 0.001,
            'pretrain_epochs': 3,
            'unfreeze_last_block': False,
            'full_scale': False,
            'workers': 1,

            # Inputs
            'data_dir': None,
            'weights_dir': None,
            'auto_generate': True,

            'distill': DistillConfig().to_dict(),
            'student': STUDENT_CONFIG.to_dict(),
            'teacher': TEACHER_CONFIG.to_dict(),
            'pool': {
                'size': None,
                'top_k': None,
                'prompt_length': None,
                'layers': None,
                'g_layers': None,
                'components_per_task': None,
            },
            'dataset': SyntheticDatasetSpec().to_dict(),
            'sweep': {
                'kd_prompt_lengths': [],
                'kd_prompt_depths': [],
                'ablation_grid': False,
                'unfreeze': False,
                'prompt_placement': False,
            },
        }

        v = self.validator
        vit_rules = {
            'image_size': lambda x: v.validate_integer(x, 1, 4096),
            'channels': lambda x: v.validate_choice(x, (1, 3)),
            'patch_size': lambda x: v.validate_integer(x, 1, 4096),
            'embed_dim': lambda x: v.validate_integer(x, 1),
            'heads': lambda x: v.validate_integer(x, 1),
            'blocks': lambda x: v.validate_integer(x, 1, 64),
            'mlp_ratio': lambda x: v.validate_integer(x, 1),
            'num_classes': lambda x: v.validate_integer(x, 1, 65535),
        }
        self.rules = {
            'seeds': lambda x: v.validate_integer_list(x, 0, allow_empty=False),
            'pools': lambda x: v.validate_choice_list(x, POOL_METHODS, allow_empty=True),
            'distills': lambda x: v.validate_choice_list(x, DISTILL_METHODS, allow_empty=True),
            'presets': self._validate_presets,
            'tasks': lambda x: v.validate_integer(x, 1),
            'epochs': lambda x: v.validate_integer(x, 1),
            'batch_size': lambda x: v.validate_integer(x, 1),
            'learning_rate': lambda x: v.validate_float(x, 0.0),
            'pretrain_epochs': lambda x: v.validate_integer(x, 0),
            'unfreeze_last_block': v.validate_bool,
            'full_scale': v.validate_bool,
            'workers': lambda x: v.validate_integer(x, 1, 64),
            'data_dir': v.validate_optional_path,
            'weights_dir': v.validate_optional_path,
            'auto_generate': v.validate_bool,
            'distill.method': lambda x: v.validate_choice(x, DISTILL_METHODS),
            'distill.alpha': lambda x: v.validate_float(x, 0.0, 1.0),
            'distill.lam': lambda x: v.validate_float(x, 0.0),
            'distill.tau': lambda x: v.validate_float(x, 0.0, min_exclusive=True),
            'distill.kd_prompt_length': self._validate_prompt_length,
            'distill.kd_prompt_depth': lambda x: v.validate_optional_integer(x, 0),
            'distill.class_scope': lambda x: v.validate_choice(x, CLASS_SCOPES),
            'distill.kd_classifier': v.validate_bool,
            'distill.kd_prompt_placement': lambda x: v.validate_choice(x, PLACEMENTS),
            'pool.size': lambda x: v.validate_optional_integer(x, 1),
            'pool.top_k': lambda x: v.validate_optional_integer(x, 1),
            'pool.prompt_length': lambda x: (True, None) if x is None else self._validate_prompt_length(x),
            'pool.layers': lambda x: (True, None) if x is None else v.validate_integer_list(x, 0, allow_empty=False),
            'pool.g_layers': lambda x: (True, None) if x is None else v.validate_integer_list(x, 0, allow_empty=False),
            'pool.components_per_task': lambda x: v.validate_optional_integer(x, 1),
            'dataset.num_classes': lambda x: v.validate_integer(x, 1, 65535),
            'dataset.pretrain_classes': lambda x: v.validate_integer(x, 0, 65535),
            'dataset.image_size': lambda x: v.validate_integer(x, 1, 4096),
            'dataset.channels': lambda x: v.validate_choice(x, (1, 3)),
            'dataset.train_per_class': lambda x: v.validate_integer(x, 1),
            'dataset.test_per_class': lambda x: v.validate_integer(x, 1),
            'dataset.noise': lambda x: v.validate_float(x, 0.0),
            'dataset.max_shift': lambda x: v.validate_integer(x, 0),
            'dataset.contrast': lambda x: v.validate_float(x, 0.0, 0.99),
            'dataset.coarse': lambda x: v.validate_integer(x, 1),
            'dataset.seed': lambda x: v.validate_integer(x, 0),
            'sweep.kd_prompt_lengths': lambda x: self._validate_prompt_lengths(x),
            'sweep.kd_prompt_depths': lambda x: v.validate_integer_list(x, 0),
            'sweep.ablation_grid': v.validate_bool,
            'sweep.unfreeze': v.validate_bool,
            'sweep.prompt_placement': v.validate_bool,
        }
        for role in ('student', 'teacher'):
            for key, rule in vit_rules.items():
                self.rules[f'{role}.{key}'] = rule

    def _validate_prompt_length(self, value):
        ok, result = self.validator.validate_integer(value, 0)
        if ok and result % 2:
            return False, f"must be even (split into key/value halves), got {result}"
        return ok, result

    def _validate_prompt_lengths(self, value):
        ok, result = self.validator.validate_integer_list(value, 0)
        if ok and any(x % 2 for x in result):
            return False, "every KD prompt length must be even"
        return ok, result

    def _validate_presets(self, value):
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            return False, "must be a list of preset names"
        for name in value:
            resolve_preset(name)
        return True, list(value)

    def parse(self, source=None):
        """Merge a document (path, JSON text, dict or None) over the defaults"""
        document = self._load(source)
        data = self._merge(self.default_config, document, prefix="")
        return ExperimentConfig(data)

    def _load(self, source):
        if source is None:
            return {}
        if isinstance(source, dict):
            return source
        text = source
        if os.path.exists(source):
            try:
                with open(source, 'r', encoding='utf-8') as f:
                    text = f.read()
            except OSError as e:
                raise ConfigParseError(f"Failed to read config {source}: {str(e)}")
        if not text.strip():
            return {}
        try:
            document = json.loads(text)
        except ValueError as e:
            raise ConfigParseError(f"Failed to parse config: {str(e)}")
        if not isinstance(document, dict):
            raise ConfigParseError("config document must be a JSON object")
        return document

    def _merge(self, defaults, document, prefix):
        merged = copy.deepcopy(defaults)
        for key, value in document.items():
            path = f"{prefix}{key}"
            if key not in defaults:
                raise ConfigParseError(f"unknown config key '{path}'", key=path)
            if isinstance(defaults[key], dict):
                if not isinstance(value, dict):
                    raise ConfigParseError(f"'{path}' must be an object", key=path)
                merged[key] = self._merge(defaults[key], value, prefix=f"{path}.")
                continue
            ok, result = self.rules[path](value)
            if not ok:
                raise ConfigParseError(f"'{path}' {result}", key=path)
            merged[key] = result
        return merged


def parse_config(source=None):
    return ConfigManager().parse(source)


class ExperimentConfig:
    """Fully resolved experiment document"""

    def __init__(self, config_data):
        self.config_data = config_data
        # surface inconsistent model/dataset shapes at parse time
        for role in ('student', 'teacher'):
            try:
                self.vit_config(role).validate()
            except ConfigurationError as e:
                raise ConfigParseError(f"'{role}': {e}", key=role)

    def get(self, key, default=None):
        return self.config_data.get(key, default)

    def section(self, name):
        return dict(self.config_data[name])

    def to_dict(self):
        return copy.deepcopy(self.config_data)

    def export_config(self, filepath):
        """Write the resolved document; parsing it back reproduces this config"""
        try:
            with open(filepath, 'w', encoding='utf-8') as f:
                json.dump(self.config_data, f, indent=2, ensure_ascii=False, sort_keys=True)
                f.write("\n")
        except OSError as e:
            raise ConfigurationError(f"Failed to export config: {str(e)}")

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.config_data == other.config_data

    # ------------------------------------------------------------ typed views

    def vit_config(self, role):
        return ViTConfig(**self.config_data[role])

    def dataset_spec(self):
        return SyntheticDatasetSpec(**self.config_data['dataset'])

    def pool_config(self, method):
        presets = FULL_SCALE_POOL_PRESETS if self.get('full_scale') else POOL_PRESETS
        base = presets[method]
        overrides = {k: v for k, v in self.config_data['pool'].items() if v is not None}
        for key in ('layers', 'g_layers'):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        return replace(base, **overrides)

    def distill_config(self, method, **overrides):
        values = dict(self.config_data['distill'])
        values['method'] = method
        values.update(overrides)
        return DistillConfig(**values).validate()

    def run_config(self, seed, pool, method, unfreeze_last_block=None, **distill_overrides):
        unfreeze = self.get('unfreeze_last_block') if unfreeze_last_block is None else unfreeze_last_block
        return RunConfig(
            seed=seed,
            tasks=self.get('tasks'),
            epochs=self.get('epochs'),
            batch_size=self.get('batch_size'),
            learning_rate=self.get('learning_rate'),
            pretrain_epochs=self.get('pretrain_epochs'),
            unfreeze_last_block=unfreeze,
            pool=self.pool_config(pool),
            distill=self.distill_config(method, **distill_overrides),
            student=self.vit_config('student'),
            teacher=self.vit_config('teacher'),
        ).validate()

    # ------------------------------------------------------------ cells

    def _method_grid(self):
        """(pool, distill method, distill overrides, variant) for the base grid and sweeps"""
        grid = []
        if self.get('presets'):
            for name in self.get('presets'):
                pool, method, overrides = resolve_preset(name)
                grid.append((pool, method, overrides, "base" if not overrides else "noclassifier", None))
        else:
            for pool in self.get('pools'):
                for method in self.get('distills'):
                    grid.append((pool, method, {}, "base", None))

        sweep = self.config_data['sweep']
        pools = [g[0] for g in grid] or list(self.get('pools')) or ['coda']
        pool = pools[0]
        for length in sweep['kd_prompt_lengths']:
            grid.append((pool, 'kdp', {'kd_prompt_length': length}, f"len{length}", None))
        for depth in sweep['kd_prompt_depths']:
            grid.append((pool, 'kdp', {'kd_prompt_depth': depth}, f"depth{depth}", None))
        if sweep['ablation_grid']:
            grid.append((pool, 'kd', {}, "grid-p0c0", None))
            grid.append((pool, 'deit', {}, "grid-p0c1", None))
            grid.append((pool, 'kdp', {'kd_classifier': False}, "grid-p1c0", None))
            grid.append((pool, 'kdp', {'kd_classifier': True}, "grid-p1c1", None))
        if sweep['prompt_placement']:
            grid.append((pool, 'kdp', {'kd_prompt_placement': 'pool'}, "placement-pool", None))
        if sweep['unfreeze']:
            grid.append((pool, 'kdp', {}, "unfreeze", True))
        return grid

    def cells(self, seeds=None):
        seeds = list(seeds if seeds is not None else self.get('seeds'))
        validator = FileValidator()
        cells, seen = [], set()
        for pool, method, overrides, variant, unfreeze in self._method_grid():
            for seed in seeds:
                run_id = f"{pool}-{method}-{variant}-s{seed}"
                if run_id in seen:
                    continue
                ok, message = validator.is_valid_run_id(run_id)
                if not ok:
                    raise ConfigurationError(message)
                seen.add(run_id)
                cells.append(Cell(run_id, seed, pool, method, variant,
                                  self.run_config(seed, pool, method, unfreeze, **overrides)))
        if not cells:
            raise ConfigurationError("the config selects no runs (empty pools/distills and no presets or sweeps)")
        return cells
