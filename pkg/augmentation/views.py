#!/usr/bin/env python3
"""
Stochastic view generators for the teacher (weak) and student (contrastive) paths.

Every random choice is drawn up front into a draw object from an explicit
torch.Generator, then applied by ``render_view``. A contrastive view with all
photometric stages skipped is therefore the weak view of the same crop/flip draw.
"""
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF

from shared.models import AugmentationPolicy, ColorJitterSpec, StudentAugmentation


ImageLike = Union[np.ndarray, torch.Tensor]

# brightness, contrast, saturation, hue
JITTER_OPS = 4
BLUR_SIGMA = (0.1, 2.0)


class Normalization(NamedTuple):
    """Per-channel standardization constants in [0, 1] pixel units"""
    mean: list[float]
    std: list[float]


@dataclass(frozen=True)
class CropFlipDraw:
    """Geometry of one view: crop box in source pixels, plus flip"""
    top: int
    left: int
    height: int
    width: int
    flip: bool
    scale: float = 1.0

    @classmethod
    def full(cls, height: int, width: int) -> "CropFlipDraw":
        return cls(top=0, left=0, height=height, width=width, flip=False, scale=1.0)


@dataclass(frozen=True)
class PhotometricDraw:
    """Color stages of one view; factors are ignored for stages that do not fire"""
    jitter: bool = False
    jitter_order: tuple[int, ...] = (0, 1, 2, 3)
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    blur: bool = False
    blur_sigma: float = 1.0

    @classmethod
    def skip(cls) -> "PhotometricDraw":
        return cls()


@dataclass
class ViewPair:
    """One teacher view and one or more student views of the same source image"""
    teacher_view: torch.Tensor
    student_views: list[torch.Tensor] = field(default_factory=list)
    source_id: int = 0


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return float(torch.empty(1).uniform_(low, high, generator=generator))


def _randint(generator: torch.Generator, low: int, high: int) -> int:
    """Integer in [low, high)"""
    return int(torch.randint(low, high, (1,), generator=generator))


def to_float_chw(image: ImageLike) -> torch.Tensor:
    """HxWx3 uint8 array (or CHW tensor) to a CHW float tensor in [0, 1]"""
    if isinstance(image, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    else:
        tensor = image
    if tensor.dtype == torch.uint8:
        return tensor.float().div(255.0)
    return tensor.float()


def draw_crop_flip(height: int, width: int, policy: AugmentationPolicy, generator: torch.Generator) -> CropFlipDraw:
    """
    Sample a random-resized-crop box and a flip decision.

    Up to ten attempts are made to find a box with area fraction in
    [crop_ratio_low, crop_ratio_high] and aspect ratio in range; otherwise
    the largest central box with an in-range aspect ratio is used.
    """
    area = height * width
    log_ratio = (math.log(policy.aspect_ratio[0]), math.log(policy.aspect_ratio[1]))
    box = None

    for _ in range(10):
        scale = _uniform(generator, policy.crop_ratio_low, policy.crop_ratio_high)
        aspect = math.exp(_uniform(generator, *log_ratio))
        w = int(round(math.sqrt(area * scale * aspect)))
        h = int(round(math.sqrt(area * scale / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = _randint(generator, 0, height - h + 1)
            left = _randint(generator, 0, width - w + 1)
            box = (top, left, h, w, scale)
            break

    if box is None:
        in_ratio = width / height
        if in_ratio < policy.aspect_ratio[0]:
            w = width
            h = int(round(w / policy.aspect_ratio[0]))
        elif in_ratio > policy.aspect_ratio[1]:
            h = height
            w = int(round(h * policy.aspect_ratio[1]))
        else:
            w, h = width, height
        box = ((height - h) // 2, (width - w) // 2, h, w, h * w / area)

    flip = _uniform(generator, 0.0, 1.0) < policy.flip_prob
    top, left, h, w, scale = box
    return CropFlipDraw(top=top, left=left, height=h, width=w, flip=flip, scale=scale)


def draw_photometric(policy: AugmentationPolicy, generator: torch.Generator) -> PhotometricDraw:
    """Sample the color stages; the stream layout does not depend on which stages fire"""
    jitter = policy.color_jitter or ColorJitterSpec(strength=0.0, prob=0.0)

    fire_jitter = _uniform(generator, 0.0, 1.0) < jitter.prob
    order = tuple(int(i) for i in torch.randperm(JITTER_OPS, generator=generator))
    brightness = _uniform(generator, max(0.0, 1.0 - jitter.brightness), 1.0 + jitter.brightness)
    contrast = _uniform(generator, max(0.0, 1.0 - jitter.contrast), 1.0 + jitter.contrast)
    saturation = _uniform(generator, max(0.0, 1.0 - jitter.saturation), 1.0 + jitter.saturation)
    hue = _uniform(generator, -jitter.hue, jitter.hue)

    fire_gray = _uniform(generator, 0.0, 1.0) < (policy.grayscale_prob or 0.0)
    fire_blur = _uniform(generator, 0.0, 1.0) < (policy.blur_prob or 0.0)
    sigma = _uniform(generator, *BLUR_SIGMA)

    return PhotometricDraw(
        jitter=fire_jitter and policy.color_jitter is not None,
        jitter_order=order,
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        hue=hue,
        grayscale=fire_gray,
        blur=fire_blur,
        blur_sigma=sigma,
    )


def blur_kernel_size(side: int) -> int:
    """10% of the image side, rounded up to an odd integer"""
    size = math.ceil(0.1 * side)
    return size if size % 2 == 1 else size + 1


def _apply_jitter(img: torch.Tensor, draw: PhotometricDraw) -> torch.Tensor:
    for op in draw.jitter_order:
        if op == 0:
            img = TF.adjust_brightness(img, draw.brightness)
        elif op == 1:
            img = TF.adjust_contrast(img, draw.contrast)
        elif op == 2:
            img = TF.adjust_saturation(img, draw.saturation)
        else:
            img = TF.adjust_hue(img, draw.hue)
    return img


def render_view(
    image: ImageLike,
    crop: CropFlipDraw,
    photometric: PhotometricDraw,
    output_side: int,
    normalization: Normalization,
) -> torch.Tensor:
    """Apply pre-drawn crop/flip and color stages, then standardize"""
    img = to_float_chw(image)
    img = TF.resized_crop(img, crop.top, crop.left, crop.height, crop.width, [output_side, output_side], antialias=True)
    if crop.flip:
        img = TF.hflip(img)
    if photometric.jitter:
        img = _apply_jitter(img, photometric)
    if photometric.grayscale:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if photometric.blur:
        kernel = blur_kernel_size(output_side)
        img = TF.gaussian_blur(img, [kernel, kernel], [photometric.blur_sigma, photometric.blur_sigma])
    img = img.clamp(0.0, 1.0)
    return TF.normalize(img, normalization.mean, normalization.std)


def weak_augment(
    image: ImageLike,
    policy: AugmentationPolicy,
    draw: torch.Generator,
    normalization: Normalization,
) -> torch.Tensor:
    """Random resized crop and horizontal flip only"""
    if policy.kind != "weak":
        raise ValueError(f"weak_augment needs a weak policy, got '{policy.kind}'")
    height, width = _image_hw(image)
    crop = draw_crop_flip(height, width, policy, draw)
    return render_view(image, crop, PhotometricDraw.skip(), policy.output_side, normalization)


def contrastive_augment(
    image: ImageLike,
    policy: AugmentationPolicy,
    draw: torch.Generator,
    normalization: Normalization,
) -> torch.Tensor:
    """Crop and flip, then color jitter, grayscale and blur, each with its own probability"""
    if policy.kind not in ("contrastive", "multicrop_student"):
        raise ValueError(f"contrastive_augment needs a contrastive policy, got '{policy.kind}'")
    height, width = _image_hw(image)
    crop = draw_crop_flip(height, width, policy, draw)
    photometric = draw_photometric(policy, draw)
    return render_view(image, crop, photometric, policy.output_side, normalization)


def augment(
    image: ImageLike,
    policy: AugmentationPolicy,
    draw: torch.Generator,
    normalization: Normalization,
) -> torch.Tensor:
    """Dispatch on policy kind"""
    if policy.kind == "weak":
        return weak_augment(image, policy, draw, normalization)
    return contrastive_augment(image, policy, draw, normalization)


def _image_hw(image: ImageLike) -> tuple[int, int]:
    if isinstance(image, np.ndarray):
        return image.shape[0], image.shape[1]
    return image.shape[-2], image.shape[-1]


def seeded_generator(seed_sequence: np.random.SeedSequence) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed_sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))
    return generator


def sample_seed_sequence(seed: int, epoch: int, sample_id: int) -> np.random.SeedSequence:
    """Root of the per-sample random streams"""
    return np.random.SeedSequence([seed, epoch, sample_id])


def make_view_pair(
    image: ImageLike,
    weak_policy: AugmentationPolicy,
    student_policy: AugmentationPolicy,
    crop_sides: Sequence[int],
    draw: np.random.SeedSequence,
    normalization: Normalization,
    source_id: int = 0,
) -> ViewPair:
    """
    Teacher view at the canonical side and one student view per crop side.

    Teacher and student views use distinct child streams of ``draw``.
    The first crop side is the canonical side.
    """
    if not crop_sides:
        raise ValueError("crop_sides must not be empty")
    streams = [seeded_generator(child) for child in draw.spawn(1 + len(crop_sides))]

    teacher_view = augment(image, weak_policy, streams[0], normalization)
    student_views = []
    for side, stream in zip(crop_sides, streams[1:]):
        policy = student_policy if side == student_policy.output_side else student_policy.model_copy(
            update={"output_side": side, "kind": "multicrop_student"}
        )
        student_views.append(augment(image, policy, stream, normalization))

    return ViewPair(teacher_view=teacher_view, student_views=student_views, source_id=source_id)


def eval_view(image: ImageLike, side: int, normalization: Normalization) -> torch.Tensor:
    """Deterministic evaluation preprocessing: resize shorter edge, center crop, standardize"""
    img = to_float_chw(image)
    img = TF.resize(img, [side], antialias=True)
    img = TF.center_crop(img, [side, side])
    return TF.normalize(img.clamp(0.0, 1.0), normalization.mean, normalization.std)


def student_policy(settings: StudentAugmentation, side: int, seed: int = 0) -> AugmentationPolicy:
    """Contrastive policy of the student path"""
    return AugmentationPolicy(
        kind="contrastive",
        crop_ratio_low=settings.crop_ratio_low,
        flip_prob=settings.flip_prob,
        color_jitter=ColorJitterSpec(strength=settings.jitter_strength, prob=settings.jitter_prob),
        grayscale_prob=settings.grayscale_prob,
        blur_prob=settings.blur_prob,
        output_side=side,
        rng_seed=seed,
    )


def teacher_policy(name: str, side: int, settings: StudentAugmentation, seed: int = 0) -> AugmentationPolicy:
    """
    Teacher-path policy for a named preset.

    Presets combine crop, flip, jitter, grayscale and blur with '+';
    'weak' is crop+flip, 'contrastive' is the full student pipeline and
    'none' only resizes. Color stages use the student settings.
    """
    if name == "contrastive":
        return student_policy(settings, side, seed)
    stages = set() if name == "none" else set(("crop+flip" if name == "weak" else name).split("+"))
    unknown = stages - {"crop", "flip", "jitter", "grayscale", "blur"}
    if unknown:
        raise ValueError(f"unknown augmentation stage(s) {sorted(unknown)} in '{name}'")

    photometric = stages & {"jitter", "grayscale", "blur"}
    crop = "crop" in stages
    return AugmentationPolicy(
        kind="contrastive" if photometric else "weak",
        crop_ratio_low=settings.crop_ratio_low if crop else 1.0,
        aspect_ratio=(3.0 / 4.0, 4.0 / 3.0) if crop else (1.0, 1.0),
        flip_prob=settings.flip_prob if "flip" in stages else 0.0,
        color_jitter=ColorJitterSpec(strength=settings.jitter_strength, prob=settings.jitter_prob)
        if "jitter" in stages else None,
        grayscale_prob=settings.grayscale_prob if "grayscale" in stages else None,
        blur_prob=settings.blur_prob if "blur" in stages else None,
        output_side=side,
        rng_seed=seed,
    )
