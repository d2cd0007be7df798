"""Expert utilization and per-class specialization statistics from routing records."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import InstructionExample, SpanTag, pack_batch
from .model import LayerRouting, RoutingTrace

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("class", "layer", "expert", "count", "frequency")

Traces = Iterable[LayerRouting | RoutingTrace]


@dataclass
class ExpertHistogram:
    layer: int
    counts: np.ndarray  # [E] top-1 dispatch counts

    @property
    def n_tokens(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def entropy(self) -> float:
        return entropy(self.frequencies)

    def dominant(self) -> tuple[int, int]:
        """(primary, secondary) expert; ties go to the lower index."""
        order = np.argsort(-self.counts, kind="stable")
        return int(order[0]), int(order[1])


def entropy(freqs) -> float:
    f = np.asarray(freqs, dtype=np.float64)
    nz = f[f > 0]
    return float(-(nz * np.log(nz)).sum())


def _top1(traces: Traces, layer: int, n_experts: int | None) -> tuple[np.ndarray, int]:
    picks, E = [], n_experts
    for t in traces:
        if t.layer != layer:
            continue
        if isinstance(t, LayerRouting):
            picks.append(t.argmax)
            E = t.n_experts if E is None else E
        else:
            picks.append(np.array([t.argmax]))
            E = len(t.logits) if E is None else E
    if not picks:
        return np.zeros(0, np.int64), E or 0
    return np.concatenate(picks).astype(np.int64), E


def expert_frequency(traces: Traces, layer: int, n_experts: int | None = None) -> ExpertHistogram:
    """Top-1 dispatch histogram for ``layer``."""
    picks, E = _top1(list(traces), layer, n_experts)
    if picks.size == 0:
        raise ValueError(f"no routed tokens for layer {layer}")
    return ExpertHistogram(layer, np.bincount(picks, minlength=E))


@dataclass
class SpecializationReport:
    histograms: dict[str, dict[int, ExpertHistogram]]  # class -> layer -> histogram

    @property
    def classes(self) -> list[str]:
        return list(self.histograms)

    @property
    def layers(self) -> list[int]:
        first = next(iter(self.histograms.values()), {})
        return sorted(first)

    def dominant(self, cls: str, layer: int) -> tuple[int, int]:
        return self.histograms[cls][layer].dominant()

    def entropy(self, cls: str, layer: int) -> float:
        return self.histograms[cls][layer].entropy

    def mean_entropy(self, layer: int) -> float:
        return float(np.mean([self.entropy(c, layer) for c in self.classes]))

    def overlap(self, layer: int) -> np.ndarray:
        """|dominant pair of a ∩ dominant pair of b| for every class pair."""
        pairs = [set(self.dominant(c, layer)) for c in self.classes]
        n = len(pairs)
        return np.array([[len(pairs[i] & pairs[j]) for j in range(n)] for i in range(n)], dtype=np.int64)

    def distinct_primaries(self, layer: int) -> int:
        return len({self.dominant(c, layer)[0] for c in self.classes})

    def to_dict(self) -> dict:
        out = {"schema_version": REPORT_SCHEMA_VERSION, "classes": self.classes, "layers": self.layers,
               "entries": [], "overlap": {}}
        for cls, per_layer in self.histograms.items():
            for layer, h in sorted(per_layer.items()):
                out["entries"].append({
                    "class": cls, "layer": layer, "counts": h.counts.tolist(),
                    "frequencies": [round(float(f), 12) for f in h.frequencies],
                    "dominant": list(h.dominant()), "entropy": h.entropy,
                })
        for layer in self.layers:
            out["overlap"][str(layer)] = self.overlap(layer).tolist()
        return out


def specialization_report(traces_by_class: Mapping[str, Traces], layers: Sequence[int],
                          n_experts: int | None = None) -> SpecializationReport:
    if len(traces_by_class) < 2:
        raise ValueError("specialization_report needs at least two classes")
    hists: dict[str, dict[int, ExpertHistogram]] = {}
    for cls in sorted(traces_by_class):
        traces = list(traces_by_class[cls])
        hists[cls] = {}
        for layer in layers:
            picks, E = _top1(traces, layer, n_experts)
            if picks.size == 0:
                raise ValueError(f"class {cls!r} has no routed tokens at layer {layer}")
            if E < 2:
                raise ValueError("need at least two experts for a dominant pair")
            hists[cls][layer] = ExpertHistogram(layer, np.bincount(picks, minlength=E))
    return SpecializationReport(hists)


def underutilized_experts(traces: Traces, threshold: float, layers: Sequence[int] | None = None
                          ) -> list[tuple[int, int]]:
    """(layer, expert) pairs whose top-1 share falls below ``threshold``."""
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    traces = list(traces)
    if layers is None:
        layers = sorted({t.layer for t in traces})
    out = []
    for layer in layers:
        freqs = expert_frequency(traces, layer).frequencies
        out.extend((layer, int(e)) for e in np.nonzero(freqs < threshold)[0])
    return out


def default_layers(n_layers: int) -> list[int]:
    """First, middle and last layer."""
    return sorted({0, n_layers // 2, n_layers - 1})


def route_examples(model, examples: Sequence[InstructionExample], batch_size: int = 16,
                   span: str = "prompt") -> dict[str, list[LayerRouting]]:
    """Run ``examples`` through ``model`` and keep routing of the chosen span, grouped by type.

    ``span`` is "prompt" (instruction and code tokens) or "all" (every real token).
    """
    if span not in ("prompt", "all"):
        raise ValueError("span must be 'prompt' or 'all'")
    grouped: dict[str, list[LayerRouting]] = {}
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            b = pack_batch(chunk)
            _, routing = model.forward(b.inputs, token_mask=b.input_mask)
            tags = b.tags[:, :-1]
            keep = (tags == SpanTag.PROMPT) if span == "prompt" else (tags != SpanTag.PADDING)
            types = np.array([ex.vulnerability_type for ex in chunk])
            for vtype in dict.fromkeys(types):
                mask = (keep & (types == vtype)[:, None]).reshape(-1)
                grouped.setdefault(str(vtype), []).extend(rec.select(mask) for rec in routing)
    return grouped


# ---------------------------------------------------------------- export


def schema_path(name: str = "specialization_report.schema.json"):
    return resources.files("moetune") / "schemas" / name


def load_schema(name: str = "specialization_report.schema.json") -> dict:
    return json.loads(schema_path(name).read_text(encoding="utf-8"))


def export_report(report: SpecializationReport | None, path, fmt: str = "json") -> None:
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            if report is not None:
                for cls, per_layer in report.histograms.items():
                    for layer, h in sorted(per_layer.items()):
                        for e, (c, f) in enumerate(zip(h.counts, h.frequencies)):
                            w.writerow([cls, layer, e, int(c), f"{f:.12f}"])
    elif fmt == "json":
        payload = report.to_dict() if report is not None else {
            "schema_version": REPORT_SCHEMA_VERSION, "classes": [], "layers": [], "entries": [], "overlap": {}}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError("format must be 'csv' or 'json'")


def read_report_csv(path) -> dict[tuple[str, int], np.ndarray]:
    """(class, layer) -> frequency vector."""
    rows: dict[tuple[str, int], dict[int, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault((r["class"], int(r["layer"])), {})[int(r["expert"])] = float(r["frequency"])
    return {k: np.array([v[e] for e in sorted(v)]) for k, v in rows.items()}


def validate_report(payload: dict) -> None:
    """Raise jsonschema.ValidationError if ``payload`` breaks the shipped schema."""
    import jsonschema

    jsonschema.validate(payload, load_schema())
    for e in payload["entries"]:
        if not math.isclose(sum(e["frequencies"]), 1.0, abs_tol=1e-6):
            raise ValueError(f"frequencies of {e['class']}/{e['layer']} do not sum to 1")
