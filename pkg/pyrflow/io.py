"""Input parsing, output information and the classes storing the options of
every part of the scene flow pipeline."""

import os
import sys
import argparse
import configparser
import logging
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Dict, List, Tuple
from .utils import atomic_path, fingerprint

header_string = r"""
                     ______
    ____  __  _______/ __/ /___ _      __
   / __ \/ / / / ___/ /_/ / __ \ | /| / /
  / /_/ / /_/ / /  / __/ / /_/ / |/ |/ /
 / .___/\__, /_/  /_/ /_/\____/|__/|__/
/_/    /____/

Coarse-to-fine scene flow estimation on point clouds with global
cross-attentive initialization and spatiotemporal re-embedding.
"""

CONFIG_ENV = "PYRFLOW_CONFIG"


class DataError(ValueError):
    """Raised when a scene file, dataset or configuration does not validate."""


class NumericalError(RuntimeError):
    """Raised when the optimization produces a non-finite value."""


class _Options:
    """Shared helpers of the option dataclasses."""

    def update(self, new: dict) -> None:
        """Update the instance with new values.

        Unknown keys raise, since a typo in a configuration file would
        otherwise be silently ignored.

        Args:
            new (dict): A dictionary containing the new values to update.

        Returns:
            None
        """
        names = {f.name for f in fields(self)}
        for key, value in new.items():
            if key not in names:
                raise DataError(f"Unknown option '{key}' for {type(self).__name__}")
            setattr(self, key, value)
        self.__post_init__()

    def as_dict(self) -> dict:
        """Return the options as a plain dictionary."""
        return asdict(self)

    def __post_init__(self) -> None:
        pass


@dataclass
class ModelConfig(_Options):
    """Architecture of the network.

    The default is the scaled-down desk profile; :meth:`large` returns the
    full-size profile.
    """

    level_sizes: Tuple[int, ...] = (2048, 512, 128, 32)
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    backbone_k: int = 16
    weightnet_hidden: int = 8
    weightnet_width: int = 8
    heads: int = 2
    attention_width: int = 32
    position_width: int = 32
    embedding_width: int = 128
    str_k: int = 16
    cost_k_target: int = 16
    cost_k_source: int = 16
    predictor_k: int = 16
    predictor_widths: Tuple[int, ...] = (64, 32)
    upsample_k: int = 3
    upsample_eps: float = 1e-8
    negative_slope: float = 0.1
    use_gf: bool = True
    use_str_spatial: bool = True
    use_str_temporal: bool = True
    w_aggregation: str = "attentive"

    def __post_init__(self) -> None:
        self.level_sizes = tuple(int(n) for n in self.level_sizes)
        self.widths = tuple(int(w) for w in self.widths)
        self.predictor_widths = tuple(int(w) for w in self.predictor_widths)
        if len(self.level_sizes) < 2:
            raise ValueError("level_sizes needs at least two pyramid levels")
        if len(self.widths) != len(self.level_sizes):
            raise ValueError("widths and level_sizes must have the same length")
        if any(a <= b for a, b in zip(self.level_sizes, self.level_sizes[1:])):
            raise ValueError(f"level_sizes must decrease strictly: {self.level_sizes}")
        if min(self.level_sizes) < 1:
            raise ValueError("level_sizes must be positive")
        if self.w_aggregation not in ("attentive", "maxpool"):
            raise ValueError(
                f"w_aggregation must be 'attentive' or 'maxpool', got {self.w_aggregation!r}"
            )
        if self.heads < 1 or self.attention_width < 1:
            raise ValueError("heads and attention_width must be positive")
        if not self.predictor_widths:
            raise ValueError("predictor_widths needs at least one width")
        largest = max(self.str_k, self.cost_k_target, self.cost_k_source)
        if largest > self.level_sizes[-1]:
            raise ValueError(
                f"neighbor counts up to {largest} exceed the coarsest level size "
                f"{self.level_sizes[-1]}"
            )

    @property
    def levels(self) -> int:
        """Number of pyramid levels."""
        return len(self.level_sizes)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Scaled-down profile that trains on a desktop CPU."""
        return cls()

    @classmethod
    def large(cls) -> "ModelConfig":
        """Full-size profile: 8192 input points, five levels, eight heads."""
        return cls(
            level_sizes=(8192, 2048, 512, 256, 64),
            widths=(32, 64, 128, 256, 512),
            heads=8,
            attention_width=128,
            predictor_widths=(128, 64),
        )


@dataclass
class LossConfig(_Options):
    """Weights and neighborhood parameters of the training losses.

    ``radius`` is expressed in scene units. Synthetic scenes have unit
    diameter, so the default is 0.05 scaled by 1/20.
    """

    deltas: Tuple[float, ...] = (0.02, 0.04, 0.08, 0.16, 0.32)
    lambdas: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    radius: float = 0.0025
    threshold: float = 0.95
    k: int = 32
    eps: float = 1e-8
    use_lfc: bool = True
    use_cfs: bool = True
    cfs_target_features: str = "updated"

    def __post_init__(self) -> None:
        self.deltas = tuple(float(d) for d in self.deltas)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if any(d <= 0 for d in self.deltas):
            raise ValueError(f"deltas must be positive: {self.deltas}")
        if len(self.lambdas) != 3 or any(v < 0 for v in self.lambdas):
            raise ValueError(
                f"lambdas must be three non-negative values: {self.lambdas}"
            )
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.k < 1 or self.eps <= 0:
            raise ValueError("k and eps must be positive")
        if self.cfs_target_features not in ("updated", "raw"):
            raise ValueError(
                f"cfs_target_features must be 'updated' or 'raw', got {self.cfs_target_features!r}"
            )

    def deltas_for(self, levels: int) -> Tuple[float, ...]:
        """Per-level weights for a pyramid with ``levels`` levels."""
        if levels > len(self.deltas):
            raise ValueError(
                f"{levels} levels need {levels} deltas, got {len(self.deltas)}"
            )
        return self.deltas[:levels]

    @property
    def effective_lambdas(self) -> Tuple[float, float, float]:
        """Lambdas with the disabled domain adaptive terms zeroed."""
        sup, lfc, cfs = self.lambdas
        return (sup, lfc if self.use_lfc else 0.0, cfs if self.use_cfs else 0.0)


@dataclass
class TrainConfig(_Options):
    """Optimization settings."""

    learning_rate: float = 1e-3
    decay_every: int = 80
    decay_factor: float = 0.5
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    precision: str = "single"
    grad_clip: float = 5.0
    patience: int = 50
    n_workers: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("decay_every and batch_size must be positive, epochs >= 0")
        if self.precision not in ("single", "double"):
            raise ValueError(
                f"precision must be 'single' or 'double', got {self.precision!r}"
            )


@dataclass
class SynthConfig(_Options):
    """Parameters of the synthetic rigid multi-object scene generator."""

    object_count: int = 4
    points_per_object: int = 512
    rotation_max: float = 0.1745
    translation_max: float = 0.1
    noise_sigma: float = 0.0
    occlusion_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.object_count < 1 or self.points_per_object < 1:
            raise ValueError("object_count and points_per_object must be positive")
        if min(self.rotation_max, self.translation_max, self.noise_sigma) < 0:
            raise ValueError(
                "rotation_max, translation_max and noise_sigma must be >= 0"
            )
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError(
                f"occlusion_fraction must be in [0, 1), got {self.occlusion_fraction}"
            )


@dataclass
class ConfigBundle:
    """All the configuration sections of a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def as_dict(self) -> dict:
        return {name: getattr(self, name).as_dict() for name in CONFIG_SECTIONS}

    @classmethod
    def from_dict(cls, record: dict) -> "ConfigBundle":
        bundle = cls()
        for name, values in record.items():
            if name not in CONFIG_SECTIONS:
                raise DataError(f"Unknown configuration section '{name}'")
            getattr(bundle, name).update(values)
        return bundle

    def fingerprint(self) -> str:
        """Hash of the model and loss sections, used to match checkpoints."""
        return fingerprint({"model": self.model.as_dict(), "loss": self.loss.as_dict()})

    def copy(self) -> "ConfigBundle":
        return ConfigBundle.from_dict(self.as_dict())


CONFIG_SECTIONS = ("model", "loss", "train", "synth")


def _convert(section: str, key: str, raw: str, default):
    """Convert a configuration string to the type of the default value."""
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, tuple):
            item_type = type(default[0]) if default else float
            return tuple(item_type(v) for v in raw.split(",") if v.strip())
        return type(default)(raw.strip())
    except (KeyError, ValueError) as err:
        raise DataError(f"Invalid value for [{section}] {key}: {raw!r}") from err


def read_config(path: str) -> ConfigBundle:
    """Read an INI configuration document.

    Args:
        path (str): The configuration file.

    Raises:
        DataError: If a section or key is unknown or a value does not convert.

    Returns:
        ConfigBundle: The configuration, defaults filled in.
    """
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)

    bundle = ConfigBundle()
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise DataError(f"Unknown configuration section [{section}] in {path}")
        options = getattr(bundle, section)
        defaults = options.as_dict()
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise DataError(f"Unknown configuration key '{key}' in [{section}]")
            values[key] = _convert(section, key, raw, defaults[key])
        try:
            options.update(values)
        except ValueError as err:
            raise DataError(f"Invalid [{section}] configuration: {err}") from err

    return bundle


def write_config(bundle: ConfigBundle, path: str) -> None:
    """Write every hyperparameter of the bundle to an INI document.

    Args:
        bundle (ConfigBundle): The configuration to write.
        path (str): The destination file.

    Returns:
        None
    """
    parser = configparser.ConfigParser()
    for section, values in bundle.as_dict().items():
        parser[section] = {
            key: (
                ", ".join(str(v) for v in value)
                if isinstance(value, (tuple, list))
                else str(value)
            )
            for key, value in values.items()
        }
    with atomic_path(path) as tmp:
        with open(tmp, "w") as f:
            parser.write(f)


@dataclass
class RunOptions:
    """Class to store the options of one command line invocation."""

    command: str = None
    config: ConfigBundle = None
    config_file: str = None
    data_dir: str = None
    val_dir: str = None
    val_fraction: float = None
    out: str = None
    ckpt: str = None
    resume: str = None
    pair: str = None
    pred: str = None
    history: str = None
    scenes: int = None
    seed: int = None
    n_workers: int = None
    per_scene: bool = None
    out_format: str = None
    threshold: float = None
    variants: List[str] = None
    seeds: List[int] = None
    ks: List[int] = None
    radii: List[float] = None
    profile: str = None
    overwrite: bool = None
    verbose: bool = None

    def update(self, new: dict) -> None:
        """Update the instance with new values.

        Args:
            new (dict): A dictionary containing the new values to update.

        Returns:
            None
        """
        for key, value in new.items():
            if hasattr(self, key):
                setattr(self, key, value)

    def __str__(self) -> str:
        """Return a string representation of the RunOptions object.

        Returns:
            str: The string representation of the RunOptions object.
        """
        return_str = header_string
        return_str += "\nFull command: " + " ".join(sys.argv)
        return_str += f"\n\nCommand: {self.command}\n"

        if self.config_file:
            return_str += f"Configuration read from: {self.config_file}\n"
        if self.config is not None:
            return_str += f"Configuration fingerprint: {self.config.fingerprint()}\n"
            model = self.config.model
            return_str += f"Pyramid level sizes: {model.level_sizes}\n"
            return_str += f"Feature widths: {model.widths}\n"
            return_str += (
                f"Global fusion: {model.use_gf} ({model.w_aggregation} aggregation)\n"
            )
            return_str += (
                f"Spatial/temporal re-embedding: "
                f"{model.use_str_spatial}/{model.use_str_temporal}\n"
            )
            loss = self.config.loss
            return_str += (
                f"Loss weights: {loss.effective_lambdas}, radius {loss.radius}, "
                f"threshold {loss.threshold}, k {loss.k}\n"
            )

        if self.data_dir:
            return_str += f"\nData read from: {self.data_dir}\n"
        if self.val_dir:
            return_str += f"Validation data read from: {self.val_dir}\n"
        if self.ckpt:
            return_str += f"Checkpoint: {self.ckpt}\n"
        if self.resume:
            return_str += f"Resuming from: {self.resume}\n"
        if self.out:
            return_str += f"Output written to: {self.out}\n"

        return return_str + "\n"


class Logger:
    """Logger class."""

    logformat = "%(asctime)s %(levelname)-8s [%(filename)s:%(lineno)d] <%(funcName)s> %(message)s"
    formatter = logging.Formatter(fmt=logformat)
    logger = logging.getLogger(__name__)

    @classmethod
    def setup(cls, logfile: str) -> None:
        """Set up the logger.

        Handlers of a previous setup are removed, so the class can be
        configured again in the same process.

        Args:
            logfile (str): The path to the log file.

        Returns:
            None
        """
        for handler in list(cls.logger.handlers):
            cls.logger.removeHandler(handler)
            handler.close()
        cls.logger.setLevel(logging.INFO)
        cls.fh = logging.FileHandler(logfile)
        cls.fh.setLevel(logging.DEBUG)
        cls.fh.setFormatter(cls.formatter)
        cls.ch = logging.StreamHandler()
        cls.ch.setStream(sys.stdout)
        cls.ch.setLevel(logging.INFO)
        cls.ch.setFormatter(cls.formatter)
        cls.logger.addHandler(cls.fh)
        cls.logger.addHandler(cls.ch)
        cls.logger.info(header_string)


def check_positive(value: str) -> int:
    """Check if the given value is a positive integer.

    Args:
        value (str): The value to be checked.

    Raises:
        argparse.ArgumentTypeError: If the value is not a positive integer.

    Returns:
        int: The converted positive integer value.
    """
    ivalue = int(value)
    if ivalue <= 0:
        raise argparse.ArgumentTypeError("%s is an invalid positive int value" % value)
    return ivalue


def check_non_negative(value: str) -> int:
    """Check if the given value is a non-negative integer."""
    ivalue = int(value)
    if ivalue < 0:
        raise argparse.ArgumentTypeError(
            "%s is an invalid non-negative int value" % value
        )
    return ivalue


def check_positive_float(value: str) -> float:
    """Check if the given value is a positive real number."""
    fvalue = float(value)
    if not fvalue > 0:
        raise argparse.ArgumentTypeError("%s is an invalid positive value" % value)
    return fvalue


def extant_file(x: str) -> str:
    """Check if a file exists.

    Args:
        x (str): The file path to check.

    Raises:
        argparse.ArgumentTypeError: If the file does not exist.

    Returns:
        str: The input file path if it exists.
    """
    if not os.path.exists(x):
        raise argparse.ArgumentTypeError(f"{x} does not exist")
    return x


def comma_list(item_type):
    """Build an argparse type converting ``"a,b,c"`` to a list."""

    def convert(value: str) -> list:
        try:
            items = [item_type(v) for v in value.split(",") if v.strip()]
        except ValueError as err:
            raise argparse.ArgumentTypeError(f"invalid list value {value!r}") from err
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items

    return convert


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one sub-parser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=extant_file,
        metavar="FILE",
        help=f"INI configuration file (default: ${CONFIG_ENV} if set, otherwise built-in defaults)",
    )
    common.add_argument(
        "--log",
        type=str,
        metavar="FILE",
        default="pyrflow.log",
        help="log file (default: pyrflow.log)",
    )
    common.add_argument(
        "-f",
        "--force-overwrite",
        dest="force",
        action="store_true",
        help="force overwriting the output files",
    )
    common.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="increase verbosity, printing the timings for each part of the program.",
    )

    parser = argparse.ArgumentParser(
        prog="pyrflow",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=header_string,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    synth.add_argument("--out", required=True, metavar="DIR", help="output directory")
    synth.add_argument(
        "--scenes",
        type=check_positive,
        required=True,
        metavar="N",
        help="number of scenes",
    )
    synth.add_argument(
        "--seed",
        type=check_non_negative,
        default=0,
        metavar="S",
        help="base seed (default: 0)",
    )
    synth.add_argument(
        "-np",
        "--nprocesses",
        metavar="NPROCS",
        type=check_positive,
        default=1,
        help="number of processes used to generate the scenes (default = 1)",
    )

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--data", required=True, type=extant_file, metavar="DIR")
    train.add_argument("--out", required=True, metavar="DIR")
    train.add_argument(
        "--val",
        type=extant_file,
        metavar="DIR",
        help="validation scenes (default: hold out --val-fraction of --data)",
    )
    train.add_argument(
        "--val-fraction",
        type=float,
        default=0.2,
        metavar="FRACTION",
        help="fraction of --data held out for validation when --val is absent (default: 0.2)",
    )
    train.add_argument("--resume", type=extant_file, metavar="CKPT")

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True, type=extant_file, metavar="FILE")
    evaluate.add_argument("--data", required=True, type=extant_file, metavar="DIR")
    evaluate.add_argument(
        "--per-scene", action="store_true", help="emit one report per scene"
    )
    evaluate.add_argument(
        "--format",
        dest="out_format",
        choices=("text", "structured"),
        default="text",
        help="report format (default: text)",
    )
    evaluate.add_argument("--out", metavar="FILE", help="also write the report to FILE")

    infer = sub.add_parser(
        "infer", parents=[common], help="predict the flow of one pair"
    )
    infer.add_argument("--ckpt", required=True, type=extant_file, metavar="FILE")
    infer.add_argument("--pair", required=True, type=extant_file, metavar="FILE")
    infer.add_argument("--out", required=True, metavar="FILE")

    ablate = sub.add_parser(
        "ablate", parents=[common], help="train and compare variants"
    )
    ablate.add_argument("--data", required=True, type=extant_file, metavar="DIR")
    ablate.add_argument("--val", required=True, type=extant_file, metavar="DIR")
    ablate.add_argument("--out", required=True, metavar="DIR")
    ablate.add_argument(
        "--variants",
        type=comma_list(str),
        default=["full", "gf_off", "str_off", "da_off"],
        metavar="V1,V2",
        help="named variants or key=value overrides (default: full,gf_off,str_off,da_off)",
    )
    ablate.add_argument(
        "--seeds", type=comma_list(int), default=[0, 1, 2], metavar="S1,S2"
    )

    plot = sub.add_parser("plot", parents=[common], help="render a static figure")
    source = plot.add_mutually_exclusive_group(required=True)
    source.add_argument("--pair", type=extant_file, metavar="FILE")
    source.add_argument("--history", type=extant_file, metavar="LOG")
    plot.add_argument("--pred", type=extant_file, metavar="FILE")
    plot.add_argument("--out", required=True, metavar="IMAGE")
    plot.add_argument(
        "--threshold",
        type=check_positive_float,
        default=0.1,
        metavar="METERS",
        help="end point error above which warped points are drawn red (default: 0.1)",
    )

    search = sub.add_parser(
        "search", parents=[common], help="compare KNN and KNN+radius neighborhoods"
    )
    search.add_argument("--data", required=True, type=extant_file, metavar="DIR")
    search.add_argument("--out", required=True, metavar="PREFIX")
    search.add_argument("--k", dest="ks", type=comma_list(int), default=[8, 16, 32])
    search.add_argument(
        "--radius",
        dest="radii",
        type=comma_list(float),
        default=[0.0025, 0.005, 0.01, 0.02, 0.05],
    )

    config = sub.add_parser(
        "config", parents=[common], help="write the default configuration"
    )
    config.add_argument("--out", required=True, metavar="FILE")
    config.add_argument("--profile", choices=("desk", "large"), default="desk")

    return parser


def configure_runtime(args_in: List[str]) -> RunOptions:
    """Configure the runtime based on command line arguments.

    Args:
        args_in (List[str]): The command line arguments.

    Returns:
        RunOptions: The parsed options.
    """
    parser = build_parser()
    args = parser.parse_args(args_in)

    # setup the logger
    Logger.setup(args.log)

    # check input consistency
    if args.command == "train" and not 0.0 < args.val_fraction < 1.0 and not args.val:
        parser.error("--val-fraction must be in (0, 1) when --val is not given")

    if args.command == "plot" and args.pred and not args.pair:
        parser.error("--pred only makes sense together with --pair")

    if args.command == "ablate":
        from .train import parse_variant

        for name in args.variants:
            try:
                parse_variant(name)
            except DataError as err:
                parser.error(str(err))

    return parse_args(args)


def parse_args(args: argparse.Namespace) -> RunOptions:
    """Parse all the information from the argument parser, storing in the
    RunOptions class.

    Args:
        args (Namespace): The arguments parsed from the argument parser.

    Returns:
        RunOptions: An instance of the RunOptions class with the parsed options.
    """
    config_file = getattr(args, "config", None) or os.environ.get(CONFIG_ENV) or None
    if config_file:
        if not os.path.exists(config_file):
            raise FileNotFoundError(f"Configuration file {config_file} does not exist")
        config = read_config(config_file)
    elif getattr(args, "profile", None) == "large":
        config = ConfigBundle(model=ModelConfig.large(), loss=LossConfig(radius=0.05))
    else:
        config = ConfigBundle()

    options_dict = {
        "command": args.command,
        "config": config,
        "config_file": config_file,
        "data_dir": getattr(args, "data", None),
        "val_dir": getattr(args, "val", None),
        "val_fraction": getattr(args, "val_fraction", None),
        "out": getattr(args, "out", None),
        "ckpt": getattr(args, "ckpt", None),
        "resume": getattr(args, "resume", None),
        "pair": getattr(args, "pair", None),
        "pred": getattr(args, "pred", None),
        "history": getattr(args, "history", None),
        "scenes": getattr(args, "scenes", None),
        "seed": getattr(args, "seed", None),
        "n_workers": getattr(args, "nprocesses", 1),
        "per_scene": bool(getattr(args, "per_scene", False)),
        "out_format": getattr(args, "out_format", "text"),
        "threshold": getattr(args, "threshold", None),
        "variants": getattr(args, "variants", None),
        "seeds": getattr(args, "seeds", None),
        "ks": getattr(args, "ks", None),
        "radii": getattr(args, "radii", None),
        "profile": getattr(args, "profile", None),
        "overwrite": args.force,
        "verbose": args.verbose,
    }

    # single-file outputs must not clobber existing results
    if args.command in ("infer", "plot", "config") and not args.force:
        if os.path.exists(args.out):
            raise FileExistsError(
                f"File {args.out} already exists, specify a new filename with --out or use the -f option."
            )

    return RunOptions(**options_dict)


def with_overrides(bundle: ConfigBundle, overrides: Dict[str, object]) -> ConfigBundle:
    """Return a copy of ``bundle`` with flat ``key=value`` overrides applied.

    Keys are looked up in every section; ``section.key`` disambiguates.

    Args:
        bundle (ConfigBundle): The base configuration.
        overrides (Dict[str, object]): The values to change.

    Returns:
        ConfigBundle: The modified copy.
    """
    new = bundle.copy()
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections = [section] if section in CONFIG_SECTIONS else []
            if sections and name not in getattr(new, section).as_dict():
                sections = []
        else:
            name = key
            sections = [s for s in CONFIG_SECTIONS if name in getattr(new, s).as_dict()]
        if not sections:
            raise DataError(f"Unknown configuration key '{key}'")
        options = getattr(new, sections[0])
        default = options.as_dict()[name]
        if isinstance(value, str):
            value = _convert(sections[0], name, value, default)
        setattr(new, sections[0], replace(options, **{name: value}))
    return new
