"""QP-map coding pipeline: CTU classification, JRD-driven QP assignment,
YUV420 color conversion, a deterministic DCT proxy codec, and an adapter
for external encoders.

The proxy codec rates and reconstructs the luma plane only (chroma passes
through untouched); its bit counts are a zero-order-entropy proxy, labeled
proxy-bpp, and are never comparable to a real encoder's bitrate.
"""

from __future__ import annotations

import math
import os
import subprocess
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    AdapterError,
    ConfigError,
    ContractError,
    FormatError,
    ValidationError,
)
from .metrics import psnr
from .resample import bilinear_resize_2d

CTU_SIZE = 64

QP_MIN, QP_MAX = 0, 63

DELTA_QP_GRID = (-4, -3, -2, -1, 0)

CTU_OVERHEAD_BITS = 16

CELL_OBJECT = "object"
CELL_BACKGROUND = "background"


def thread_count() -> int:
    """Worker cap from DTJRD_THREADS; 0 (the default) means single-threaded."""
    raw = os.environ.get("DTJRD_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"DTJRD_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"DTJRD_THREADS must be >= 0, got {value}")
    return value


def _grid_shape(width: int, height: int, ctu: int = CTU_SIZE) -> tuple[int, int]:
    return math.ceil(height / ctu), math.ceil(width / ctu)


@dataclass(frozen=True)
class QpMap:
    """Per-CTU integer QPs plus the object/background kind of each cell."""

    width: int
    height: int
    qp: np.ndarray  # [rows, cols] int
    kind: np.ndarray  # [rows, cols] str, object|background
    ctu: int = CTU_SIZE

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.ctu < 1:
            raise ValidationError("QpMap dimensions must be positive")
        rows, cols = _grid_shape(self.width, self.height, self.ctu)
        qp = np.asarray(self.qp, dtype=np.int64)
        kind = np.asarray(self.kind)
        if qp.shape != (rows, cols):
            raise ValidationError(
                f"qp grid {qp.shape} does not match ceil({self.height}/{self.ctu}) x "
                f"ceil({self.width}/{self.ctu}) = ({rows}, {cols})"
            )
        if kind.shape != (rows, cols):
            raise ValidationError(f"kind grid {kind.shape} != qp grid {qp.shape}")
        if np.any((qp < QP_MIN) | (qp > QP_MAX)):
            raise ValidationError(f"QPs must lie in [{QP_MIN}, {QP_MAX}]")
        bad = set(np.unique(kind)) - {CELL_OBJECT, CELL_BACKGROUND}
        if bad:
            raise ValidationError(f"unknown cell kinds {sorted(bad)}")
        obj = kind == CELL_OBJECT
        if np.any(obj) and np.any(~obj):
            if qp[obj].max() > qp[~obj].min():
                raise ValidationError(
                    "object-cell QP exceeds background QP; background must not "
                    "spend more bits than any object region"
                )
        object.__setattr__(self, "qp", qp)
        object.__setattr__(self, "kind", kind)

    @property
    def rows(self) -> int:
        return self.qp.shape[0]

    @property
    def cols(self) -> int:
        return self.qp.shape[1]


def save_qpmap(qpmap: QpMap, path) -> None:
    """Text sidecar: line 1 'w h ctu', then one 'row col qp kind' per cell."""
    lines = [f"{qpmap.width} {qpmap.height} {qpmap.ctu}"]
    for r in range(qpmap.rows):
        for c in range(qpmap.cols):
            lines.append(f"{r} {c} {int(qpmap.qp[r, c])} {qpmap.kind[r, c]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_qpmap(path) -> QpMap:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty QP-map sidecar")
    head = lines[0].split()
    if len(head) != 3:
        raise FormatError(f"{path}: header must be 'w h ctu', got {lines[0]!r}")
    try:
        width, height, ctu = (int(v) for v in head)
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer header: {exc}") from exc
    rows, cols = _grid_shape(width, height, ctu)
    qp = np.zeros((rows, cols), dtype=np.int64)
    kind = np.full((rows, cols), CELL_BACKGROUND, dtype="<U10")
    filled = np.zeros((rows, cols), dtype=bool)
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'row col qp kind'")
        try:
            r, c, q = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if not (0 <= r < rows and 0 <= c < cols):
            raise FormatError(f"{path}:{lineno}: cell ({r}, {c}) outside grid")
        if filled[r, c]:
            raise FormatError(f"{path}:{lineno}: duplicate cell ({r}, {c})")
        filled[r, c] = True
        qp[r, c] = q
        kind[r, c] = parts[3]
    if not filled.all():
        raise FormatError(f"{path}: {int((~filled).sum())} cells missing")
    return QpMap(width=width, height=height, qp=qp, kind=kind, ctu=ctu)


# -- CTU classification and QP assignment ----------------------------------


def classify_ctus(width: int, height: int, bboxes):
    """Cell kinds plus, per cell, the indices of intersecting bboxes.

    A cell is an object cell iff its pixel rectangle and some bbox share
    positive area; mere boundary contact does not count.
    """
    if width < 1 or height < 1:
        raise ValidationError("image dimensions must be positive")
    for i, (x1, y1, x2, y2) in enumerate(bboxes):
        if x2 <= x1 or y2 <= y1:
            raise ValidationError(f"bbox {i} {x1, y1, x2, y2} has non-positive extent")
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
            raise ValidationError(
                f"bbox {i} {x1, y1, x2, y2} outside {width}x{height} image"
            )
    rows, cols = _grid_shape(width, height)
    kind = np.full((rows, cols), CELL_BACKGROUND, dtype="<U10")
    cell_objects = [[[] for _ in range(cols)] for _ in range(rows)]
    for r in range(rows):
        cy1, cy2 = r * CTU_SIZE, min((r + 1) * CTU_SIZE, height)
        for c in range(cols):
            cx1, cx2 = c * CTU_SIZE, min((c + 1) * CTU_SIZE, width)
            for i, (x1, y1, x2, y2) in enumerate(bboxes):
                if min(x2, cx2) > max(x1, cx1) and min(y2, cy2) > max(y1, cy1):
                    cell_objects[r][c].append(i)
            if cell_objects[r][c]:
                kind[r, c] = CELL_OBJECT
    return kind, cell_objects


def assign_qps(width: int, height: int, kind, cell_objects, jrds,
               delta_qp: int = 0, qp_b: int = QP_MAX) -> QpMap:
    """Build the QP map from per-object JRDs.

    Object cells get clamp(min JRD among intersecting objects + delta_qp);
    background cells get qp_b.  If qp_b undercuts an object cell's QP it is
    raised to the maximum object QP, with a warning, so the background never
    outspends object regions.
    """
    jrds = [int(j) for j in jrds]
    if any(j < QP_MIN or j > QP_MAX for j in jrds):
        raise ValidationError(f"JRD values must lie in [{QP_MIN}, {QP_MAX}]")
    if not QP_MIN <= qp_b <= QP_MAX:
        raise ValidationError(f"qp_b {qp_b} out of [{QP_MIN}, {QP_MAX}]")
    if not -4 <= delta_qp <= 0:
        warnings.warn(
            f"delta_qp {delta_qp} is outside the evaluated [-4, 0] grid",
            stacklevel=2,
        )
    kind = np.asarray(kind)
    rows, cols = kind.shape
    qp = np.full((rows, cols), qp_b, dtype=np.int64)
    max_object_qp = None
    for r in range(rows):
        for c in range(cols):
            if kind[r, c] != CELL_OBJECT:
                continue
            indices = cell_objects[r][c]
            if not indices:
                raise ValidationError(f"object cell ({r}, {c}) lists no objects")
            value = min(jrds[i] for i in indices) + delta_qp
            qp[r, c] = min(max(value, QP_MIN), QP_MAX)
            max_object_qp = qp[r, c] if max_object_qp is None else max(max_object_qp, qp[r, c])
    effective_qp_b = qp_b
    if max_object_qp is not None and qp_b < max_object_qp:
        warnings.warn(
            f"background QP {qp_b} below object QP {max_object_qp}; raising it",
            stacklevel=2,
        )
        effective_qp_b = int(max_object_qp)
        qp[kind != CELL_OBJECT] = effective_qp_b
    return QpMap(width=width, height=height, qp=qp, kind=kind)


def build_qpmap(width: int, height: int, bboxes, jrds,
                delta_qp: int = 0, qp_b: int = QP_MAX) -> QpMap:
    if len(bboxes) != len(jrds):
        raise ContractError(f"{len(bboxes)} bboxes vs {len(jrds)} JRDs")
    kind, cell_objects = classify_ctus(width, height, bboxes)
    return assign_qps(width, height, kind, cell_objects, jrds, delta_qp, qp_b)


# -- color conversion -------------------------------------------------------


def _pad_to_even(plane: np.ndarray) -> np.ndarray:
    ph = plane.shape[0] % 2
    pw = plane.shape[1] % 2
    if ph or pw:
        pad = ((0, ph), (0, pw)) + ((0, 0),) * (plane.ndim - 2)
        plane = np.pad(plane, pad, mode="edge")
    return plane


def rgb_to_yuv420(image) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range BT.601 with 2x2 box-downsampled chroma; odd sizes are
    edge-replicated to even first.  Returns uint8 (y, u, v) planes."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected [H, W, 3] RGB, got shape {image.shape}")
    image = _pad_to_even(image)
    r, g, b = image[:, :, 0], image[:, :, 1], image[:, :, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128.0 + 0.564 * (b - y)
    v = 128.0 + 0.713 * (r - y)
    h, w = y.shape

    def down(chroma):
        return chroma.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    def to8(plane):
        return np.clip(np.rint(plane), 0, 255).astype(np.uint8)

    return to8(y), to8(down(u)), to8(down(v))


def yuv420_to_rgb(y, u, v, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Inverse of rgb_to_yuv420 with bilinear chroma upsampling; the optional
    width/height crop removes any even-padding added on the forward path."""
    y = np.asarray(y, dtype=np.float64)
    u = bilinear_resize_2d(np.asarray(u, dtype=np.float64), y.shape[0], y.shape[1])
    v = bilinear_resize_2d(np.asarray(v, dtype=np.float64), y.shape[0], y.shape[1])
    r = y + 1.402 * (v - 128.0)
    b = y + 1.772 * (u - 128.0)
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    rgb = np.clip(np.rint(np.stack([r, g, b], axis=2)), 0, 255).astype(np.uint8)
    if height is not None:
        rgb = rgb[:height]
    if width is not None:
        rgb = rgb[:, :width]
    return rgb


# -- proxy codec -------------------------------------------------------------


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; D @ D.T = I."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


_DCT8 = dct_matrix(8)


def qp_to_qstep(qp) -> np.ndarray:
    """Quantizer step doubles every 6 QP: 2^((QP - 4) / 6)."""
    return np.power(2.0, (np.asarray(qp, dtype=np.float64) - 4.0) / 6.0)


def _block_entropy_bits(symbols: np.ndarray, n_real: int) -> int:
    """ceil(zero-order entropy * real pixel count) for one CTU's coefficients."""
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    entropy = float(-(p * np.log2(p)).sum())
    return math.ceil(entropy * n_real)


def proxy_encode(y_plane, qpmap: QpMap) -> tuple[int, np.ndarray]:
    """Deterministic 8x8 DCT + uniform quantization at the map's per-CTU QPs.

    Returns (bits, reconstruction).  Bits are the per-CTU zero-order entropy
    of the quantized coefficients scaled by the CTU's real (unpadded) pixel
    count, plus a fixed per-CTU overhead; the boundary padding itself is
    edge replication and contributes no counted bits.
    """
    plane = np.asarray(y_plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ContractError(f"proxy_encode expects a 2-D plane, got {plane.shape}")
    h, w = plane.shape
    if (qpmap.height, qpmap.width) != (h, w):
        raise ContractError(
            f"QP map is {qpmap.width}x{qpmap.height}, plane is {w}x{h}"
        )
    rows, cols = qpmap.rows, qpmap.cols
    ph, pw = rows * CTU_SIZE, cols * CTU_SIZE
    padded = np.pad(plane, ((0, ph - h), (0, pw - w)), mode="edge")

    blocks = padded.reshape(ph // 8, 8, pw // 8, 8).transpose(0, 2, 1, 3)
    coeffs = np.einsum("ij,abjk,lk->abil", _DCT8, blocks, _DCT8, optimize=True)
    qstep = qp_to_qstep(qpmap.qp)
    per_block_step = np.repeat(np.repeat(qstep, 8, axis=0), 8, axis=1)
    quantized = np.rint(coeffs / per_block_step[:, :, None, None])
    dequant = quantized * per_block_step[:, :, None, None]
    recon_blocks = np.einsum("ji,abjk,kl->abil", _DCT8, dequant, _DCT8, optimize=True)
    recon = recon_blocks.transpose(0, 2, 1, 3).reshape(ph, pw)
    recon = np.clip(np.rint(recon[:h, :w]), 0, 255).astype(np.uint8)

    q_int = quantized.astype(np.int64)
    bits = 0
    for r in range(rows):
        real_h = min(CTU_SIZE, h - r * CTU_SIZE)
        for c in range(cols):
            real_w = min(CTU_SIZE, w - c * CTU_SIZE)
            ctu = q_int[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8]
            bits += _block_entropy_bits(ctu.ravel(), real_h * real_w) + CTU_OVERHEAD_BITS
    return bits, recon


# -- codec adapters -----------------------------------------------------------


class ProxyCodec:
    """Built-in adapter: codes luma with proxy_encode, passes chroma through."""

    name = "proxy"

    def encode(self, image, qpmap: QpMap) -> tuple[int, np.ndarray]:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ContractError(f"expected [H, W, 3] RGB, got shape {image.shape}")
        h, w = image.shape[:2]
        y, u, v = rgb_to_yuv420(image)
        bits, recon_y = proxy_encode(y[:h, :w], qpmap)
        recon = yuv420_to_rgb(_pad_to_even(recon_y.astype(np.float64)), u, v,
                              width=w, height=h)
        return bits, recon


class ExternalCodec:
    """Adapter that shells out to an encoder command template.

    The template may reference {input}, {qpmap}, and {output}.  Bits come
    from an integer '{output}.bits' sidecar when the tool writes one,
    otherwise from the output file size times 8.
    """

    name = "external"

    def __init__(self, template: str):
        if not template or not template.strip():
            raise ConfigError("empty encoder command template")
        self.template = template

    def encode(self, image, qpmap: QpMap) -> tuple[int, np.ndarray]:
        image = np.asarray(image)
        with tempfile.TemporaryDirectory(prefix="dtjrd_enc_") as tmp:
            tmp = Path(tmp)
            input_path = tmp / "input.png"
            qpmap_path = tmp / "input.qpmap"
            output_path = tmp / "output.png"
            Image.fromarray(image.astype(np.uint8)).save(input_path)
            save_qpmap(qpmap, qpmap_path)
            try:
                command = self.template.format(
                    input=str(input_path), qpmap=str(qpmap_path), output=str(output_path)
                )
            except (KeyError, IndexError) as exc:
                raise AdapterError(f"bad placeholder in template: {exc}") from exc
            proc = subprocess.run(
                command, shell=True, capture_output=True, text=True
            )
            if proc.returncode != 0:
                raise AdapterError(
                    f"encoder exited {proc.returncode}\n"
                    f"command: {command}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
                )
            if not output_path.exists():
                raise AdapterError(
                    f"encoder wrote no output\ncommand: {command}\n"
                    f"stdout: {proc.stdout}\nstderr: {proc.stderr}"
                )
            bits_path = Path(str(output_path) + ".bits")
            if bits_path.exists():
                try:
                    bits = int(bits_path.read_text().strip())
                except ValueError as exc:
                    raise AdapterError(f"unparseable bits sidecar: {exc}") from exc
            else:
                bits = output_path.stat().st_size * 8
            with Image.open(output_path) as out:
                recon = np.asarray(out.convert("RGB"))
        if recon.shape != image.shape:
            raise AdapterError(
                f"reconstruction shape {recon.shape} != input shape {image.shape}"
            )
        return bits, recon


# -- rate-accuracy sweep -------------------------------------------------------


def run_rate_accuracy(records, jrds: dict[str, int], base_qps, delta_qps,
                      codec, out_dir=None) -> list[dict]:
    """Encode every image at each (base QP, delta QP) setting.

    ``jrds`` maps object_id to the JRD driving its QP (predicted or ground
    truth).  Returns one row per setting with the mean bits per pixel and the
    mean PSNR over object regions; when ``out_dir`` is given, per-setting
    reconstructions are written there as PNGs.  Images are processed
    independently (DTJRD_THREADS > 1 enables a thread pool) and reduced in
    manifest order.
    """
    if not records:
        raise ContractError("run_rate_accuracy on an empty split")
    missing = [r.object_id for r in records if r.object_id not in jrds]
    if missing:
        raise ValidationError(f"no JRD for objects {missing[:5]}")

    by_image: dict[str, list] = {}
    for r in records:
        by_image.setdefault(r.source_image_id, []).append(r)

    def encode_image(item, delta_qp, qp_b):
        image_id, recs = item
        with Image.open(recs[0].image_path) as img:
            rgb = np.asarray(img.convert("RGB"))
        h, w = rgb.shape[:2]
        bboxes = [tuple(int(v) for v in r.bbox) for r in recs]
        qpmap = build_qpmap(w, h, bboxes, [jrds[r.object_id] for r in recs],
                            delta_qp=delta_qp, qp_b=qp_b)
        bits, recon = codec.encode(rgb, qpmap)
        object_psnrs = []
        for x1, y1, x2, y2 in bboxes:
            object_psnrs.append(psnr(rgb[y1:y2, x1:x2], recon[y1:y2, x1:x2]))
        return image_id, bits, w * h, object_psnrs, recon

    workers = thread_count()
    rows = []
    items = list(by_image.items())
    for qp_b in base_qps:
        for delta_qp in delta_qps:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(
                        pool.map(lambda it: encode_image(it, delta_qp, qp_b), items)
                    )
            else:
                results = [encode_image(it, delta_qp, qp_b) for it in items]
            total_bits = sum(r[1] for r in results)
            total_pixels = sum(r[2] for r in results)
            psnrs = [p for r in results for p in r[3]]
            finite = [p for p in psnrs if math.isfinite(p)]
            metric = float(np.mean(finite)) if finite else math.inf
            if out_dir is not None:
                setting_dir = Path(out_dir) / f"recon_qp{qp_b}_dqp{delta_qp}"
                setting_dir.mkdir(parents=True, exist_ok=True)
                for image_id, _, _, _, recon in results:
                    Image.fromarray(recon).save(setting_dir / f"{image_id}.png")
            rows.append(
                {
                    "base_qp": int(qp_b),
                    "delta_qp": int(delta_qp),
                    "bpp": total_bits / total_pixels,
                    "metric": metric,
                }
            )
    return rows
