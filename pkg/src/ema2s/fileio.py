"""On-disk formats.

* audio: RIFF PCM, 16-bit signed, mono
* EMA: CSV with ``<SENSOR>_x,<SENSOR>_y`` header plus a JSON sidecar
  (speaker id, utterance id, sample rate)
* normalization stats: JSON object channel -> max |value|
* checkpoints: a zip container with ``header.json`` and one little-endian
  float64 ``.npy`` member per parameter (shape recorded in each member
  and in the header)
* vocoder hand-off: raw little-endian float32 mel matrix + JSON shape sidecar

Every writer is byte-deterministic for identical inputs.
"""

import csv
import io
import json
import wave
import zipfile
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError
from .features import AXES, EmaRecording, Waveform
from .model import ArchitectureConfig
from .training import Checkpoint, LossBreakdown

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
CHECKPOINT_FORMAT = "ema2s-checkpoint/1"


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(_dump_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def write_wav(path, w):
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    rate = w.sample_rate if isinstance(w, Waveform) else 16000
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32767.0, rate)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


def write_ema(path, rec, speaker_id="spk0", utterance_id=None):
    """Write ``path`` (CSV) and ``path`` with suffix ``.json`` (metadata)."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(rec.channels)
    for row in rec.coords:
        writer.writerow([repr(float(v)) for v in row])
    path.write_text(buf.getvalue())
    meta = {
        "speaker_id": speaker_id,
        "utterance_id": utterance_id or path.stem,
        "sample_rate": rec.sample_rate,
    }
    write_json(path.with_suffix(".json"), meta)


def read_ema(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty EMA file") from None
        rows = [[float(v) for v in row] for row in reader if row]
    dims = _dims_from_header(header, path)
    sensors = tuple(dict.fromkeys(h.rsplit("_", 1)[0] for h in header))
    meta_path = path.with_suffix(".json")
    meta = read_json(meta_path) if meta_path.exists() else {}
    coords = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    rec = EmaRecording(sensors, coords, int(meta.get("sample_rate", 250)), dims, meta)
    if rec.channels != header:
        raise InvalidInputError(f"{path}: header {header} is not grouped per sensor")
    return rec


def _dims_from_header(header, path):
    axes = [h.rsplit("_", 1)[-1] for h in header]
    for dims in (2, 3):
        if len(header) % dims == 0 and axes == list(AXES[:dims]) * (len(header) // dims):
            return dims
    raise InvalidInputError(f"{path}: cannot parse channel header {header}")


def write_stats(path, stats):
    write_json(path, {k: float(v) for k, v in stats.items()})


def read_stats(path):
    return {k: float(v) for k, v in read_json(path).items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def _member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, ckpt):
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": ckpt.arch.to_dict(),
        "mel": ckpt.mel,
        "seed": ckpt.seed,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "variant": ckpt.variant,
        "loss_history": [l.to_dict() for l in ckpt.loss_history],
        "epoch_losses": ckpt.epoch_losses,
        "arrays": {k: list(v.shape) for k, v in sorted(ckpt.params.items())},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "header.json", _dump_json(header))
        for name in sorted(ckpt.params):
            _member(zf, f"arrays/{name}.npy", _npy_bytes(ckpt.params[name]))


def load_checkpoint(path):
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError(f"{path}: not an EMA2S checkpoint")
        params = {}
        for name, shape in header["arrays"].items():
            arr = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise InvalidInputError(f"{path}: array {name} has shape {arr.shape}, header says {shape}")
            params[name] = arr.astype(np.float64)
    return Checkpoint(
        params=params,
        arch=ArchitectureConfig.from_dict(header["architecture"]),
        stage=header["stage"],
        step=header["step"],
        variant=header["variant"],
        seed=header["seed"],
        loss_history=[LossBreakdown(**d) for d in header["loss_history"]],
        epoch_losses=header["epoch_losses"],
        mel=header["mel"],
    )


# ---------------------------------------------------------------------------
# vocoder hand-off and logs
# ---------------------------------------------------------------------------


def write_mel(path, mel):
    """Raw float32 matrix at ``path`` plus ``<path>.json`` with its shape."""
    path = Path(path)
    mel = np.ascontiguousarray(mel, dtype="<f4")
    path.write_bytes(mel.tobytes())
    write_json(Path(str(path) + ".json"), {"dtype": "float32", "byte_order": "little",
                                            "shape": list(mel.shape), "layout": "frames x mel_bins"})


def read_mel(path):
    meta = read_json(Path(str(path) + ".json"))
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return data.reshape(meta["shape"])


def write_loss_log(path, history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "l_spec", "l_mel", "l_df", "total"])
    for step, l in enumerate(history, start=1):
        writer.writerow([step, repr(l.l_spec), repr(l.l_mel), repr(l.l_df), repr(l.total)])
    Path(path).write_text(buf.getvalue())


def read_loss_log(path):
    with Path(path).open(newline="") as fh:
        return [LossBreakdown(float(r["l_spec"]), float(r["l_mel"]), float(r["l_df"]), float(r["total"]))
                for r in csv.DictReader(fh)]
