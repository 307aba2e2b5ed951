"""
gen-data and pretrain subcommands
"""

import logging
import os
from dataclasses import replace

from core.dataset import (
    TEST_FILE,
    TRAIN_FILE,
    class_prototypes,
    dataset_from_images,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from core.errors import ConfigurationError, MissingInputError
from core.harness import pretrain_backbone
from core.vit import BackboneWeights
from core.rng import SeededRng
from utils.file_utils import FileUtils, images_from_folder, load_weights, save_preview, save_weights

logger = logging.getLogger(__name__)

STUDENT_WEIGHTS = "student.cdlw"
TEACHER_WEIGHTS = "teacher.cdlw"


def register(sub, parent):
    gen = sub.add_parser("gen-data", parents=[parent], help="generate (or import) the CDLD dataset")
    gen.add_argument("--preview", action="store_true", help="also write a PNG sheet of class prototypes")
    gen.add_argument("--from-images", default=None, metavar="DIR",
                     help="import a class-per-subfolder image tree instead of generating")
    gen.set_defaults(handler=cmd_gen_data)

    pre = sub.add_parser("pretrain", parents=[parent], help="pretrain and freeze the student and teacher backbones")
    pre.set_defaults(handler=cmd_pretrain)


# ---------------------------------------------------------------- helpers shared with run

def build_dataset(config, directory, seed=None, from_images=None, preview=False):
    spec = config.dataset_spec()
    if seed is not None:
        spec = replace(spec, seed=seed)
    if from_images:
        pixels, labels, names = images_from_folder(from_images, spec.image_size, spec.channels)
        dataset = dataset_from_images(pixels, labels, spec.pretrain_classes, seed=spec.seed)
        logger.info("Imported classes: %s", ", ".join(names))
    else:
        dataset = generate_synthetic_dataset(spec)
    utils = FileUtils()
    ok, message = utils.ensure_directory_exists(directory)
    if not ok:
        raise ConfigurationError(f"cannot create {directory}: {message}")
    checksums = save_dataset(dataset, directory)
    document = {"spec": spec.to_dict(), "from_images": from_images, "checksums": checksums,
                "num_classes": dataset.num_classes, "pretrain_classes": dataset.pretrain_classes}
    if preview:
        document["preview"] = save_preview(os.path.join(directory, "preview.png"), class_prototypes(dataset))
    utils.write_json(os.path.join(directory, "dataset.json"), document)
    return dataset


def ensure_dataset(config, directory, auto_generate):
    if all(os.path.exists(os.path.join(directory, f)) for f in (TRAIN_FILE, TEST_FILE)):
        return load_dataset(directory)
    if not auto_generate:
        raise MissingInputError(
            f"no dataset in {directory}; generate it with: cdl gen-data --out <dir> (data lands in <dir>/data)"
        )
    logger.info("No dataset in %s, generating one", directory)
    return build_dataset(config, directory)


def backbone_from_arrays(vit_config, arrays, path):
    expected = BackboneWeights.initialize(vit_config, SeededRng(0, "shape_probe")).arrays()
    mismatched = sorted(
        name for name in set(expected) | set(arrays)
        if name not in arrays or name not in expected or arrays[name].shape != expected[name].shape
    )
    if mismatched:
        raise ConfigurationError(
            f"{path} does not match the configured backbone ({mismatched[0]} and {len(mismatched) - 1} more); "
            f"rerun: cdl pretrain"
        )
    return BackboneWeights.from_arrays(vit_config, arrays, frozen=True)


def pretrain_all(config, dataset, directory, seed=0, progress=False):
    utils = FileUtils()
    ok, message = utils.ensure_directory_exists(directory)
    if not ok:
        raise ConfigurationError(f"cannot create {directory}: {message}")
    document, backbones = {}, {}
    for role, filename in (("student", STUDENT_WEIGHTS), ("teacher", TEACHER_WEIGHTS)):
        result = pretrain_backbone(
            config.vit_config(role), dataset.pretrain, config.get("pretrain_epochs"), seed=seed,
            batch_size=config.get("batch_size"), learning_rate=config.get("learning_rate"),
            cl_classes=dataset.global_classes(), progress=progress,
        )
        checksum = save_weights(os.path.join(directory, filename), result.weights.arrays())
        backbones[role] = result.weights
        document[role] = {"file": filename, "sha256": checksum, "accuracy": result.accuracy, "losses": result.losses,
                          "backbone_checksum": result.weights.checksum()}
    utils.write_json(os.path.join(directory, "pretrain.json"), document)
    return backbones["student"], backbones["teacher"], {r: document[r]["sha256"] for r in document}


def ensure_backbones(config, dataset, directory, auto_generate, progress=False):
    paths = {role: os.path.join(directory, name) for role, name in (("student", STUDENT_WEIGHTS), ("teacher", TEACHER_WEIGHTS))}
    if all(os.path.exists(p) for p in paths.values()):
        utils = FileUtils()
        backbones = {role: backbone_from_arrays(config.vit_config(role), load_weights(path), path)
                     for role, path in paths.items()}
        checksums = {role: utils.calculate_file_hash(path) for role, path in paths.items()}
        return backbones["student"], backbones["teacher"], checksums
    if not auto_generate:
        raise MissingInputError(f"no pretrained backbones in {directory}; create them with: cdl pretrain --out <dir>")
    logger.info("No pretrained backbones in %s, pretraining now", directory)
    return pretrain_all(config, dataset, directory, progress=progress)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    from cli.app import EXIT_OK, data_dir, load_config, prepare_out

    config = load_config(args)
    prepare_out(args.out)
    directory = data_dir(config, args)
    dataset = build_dataset(config, directory, seed=args.seed, from_images=args.from_images, preview=args.preview)
    logger.info("Wrote %s and %s to %s (%d continual classes, %d pretraining classes)",
                TRAIN_FILE, TEST_FILE, directory, dataset.num_classes, dataset.pretrain_classes)
    return EXIT_OK


def cmd_pretrain(args):
    from cli.app import EXIT_OK, data_dir, load_config, prepare_out, weights_dir

    config = load_config(args)
    prepare_out(args.out)
    dataset = ensure_dataset(config, data_dir(config, args), config.get("auto_generate"))
    _, _, checksums = pretrain_all(config, dataset, weights_dir(config, args),
                                   seed=args.seed or 0, progress=args.progress)
    for role, digest in checksums.items():
        logger.info("%s backbone sha256 %s", role, digest)
    return EXIT_OK
