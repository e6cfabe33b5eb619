"""On-disk sample store and checkpointing.

A store is a newline-delimited JSON file: one header record, one record per
retained draw (including its per-visit log-likelihood vector), and a footer
marking completion. Records carry no timestamps, so identical chains give
byte-identical stores. The checkpoint sits next to the store as
``<store>.ckpt.json`` and holds the full chain state plus every RNG stream
state, supporting bit-exact resume.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointIOError, IncompleteStore
from .sampler import ChainSamples, DrawRecord

SCHEMA_VERSION = 1


def dataset_hash(path):
    """SHA-256 of a dataset file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def file_hash(path):
    return dataset_hash(path)


class SampleStore:
    """Append-oriented NDJSON store for one chain."""

    def __init__(self, path, dataset_digest=None):
        self.path = Path(path)
        self.dataset_digest = dataset_digest

    @property
    def checkpoint_path(self):
        return self.path.with_suffix(self.path.suffix + ".ckpt.json")

    # ------------------------------------------------------------- writing

    def write_header(self, ds, hp, cfg, basis):
        header = {
            "kind": "header",
            "schema_version": SCHEMA_VERSION,
            "dataset_hash": self.dataset_digest,
            "variant": hp.variant,
            "n": ds.n,
            "total_visits": ds.total_visits,
            "participant_ids": [p.id for p in ds.participants],
            "visit_counts": [p.n_visits for p in ds.participants],
            "drug_names": ds.drug_names,
            "item_names": ds.item_names,
            "covariate_names": ds.covariate_names,
            "num_bases": basis.num_bases,
            "spline_domain": list(basis.domain),
            "hyperparams": hp.to_dict(),
            "sampler_config": cfg.to_dict(),
        }
        with open(self.path, "w") as fh:
            fh.write(json.dumps(header) + "\n")

    def append_draw(self, rec, pointwise_loglik):
        d = rec.to_dict()
        d["loglik"] = np.asarray(pointwise_loglik, float).tolist()
        with open(self.path, "a") as fh:
            fh.write(json.dumps(d) + "\n")

    def write_footer(self, samples):
        footer = {
            "kind": "footer",
            "n_draws": samples.n_draws,
            "acceptance_rates": samples.acceptance_rates,
        }
        with open(self.path, "a") as fh:
            fh.write(json.dumps(footer) + "\n")

    # ---------------------------------------------------------- checkpoints

    def write_checkpoint(self, ck, retained_count):
        ck = dict(ck)
        ck["retained"] = retained_count
        ck["schema_version"] = SCHEMA_VERSION
        tmp = self.checkpoint_path.with_suffix(".tmp")
        try:
            with open(tmp, "w") as fh:
                json.dump(ck, fh)
            os.replace(tmp, self.checkpoint_path)
        except OSError as exc:
            raise CheckpointIOError(f"cannot write checkpoint {self.checkpoint_path}: {exc}")

    def has_checkpoint(self):
        return self.checkpoint_path.exists()

    def load_checkpoint(self):
        try:
            with open(self.checkpoint_path) as fh:
                ck = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointIOError(f"cannot read checkpoint {self.checkpoint_path}: {exc}")
        if ck.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointIOError("checkpoint schema version mismatch")
        return ck

    def reload_draws(self, retained_count):
        """Truncate the store to the checkpointed draw count and return the
        surviving draws; the chain then appends from there."""
        lines = self.path.read_text().splitlines(keepends=True)
        if not lines:
            raise CheckpointIOError(f"store {self.path} is empty, cannot resume")
        draw_lines = [ln for ln in lines[1:] if json.loads(ln).get("kind") == "draw"]
        if len(draw_lines) < retained_count:
            raise CheckpointIOError(
                f"store has {len(draw_lines)} draws but checkpoint expects {retained_count}"
            )
        keep = draw_lines[:retained_count]
        with open(self.path, "w") as fh:
            fh.write(lines[0])
            fh.writelines(keep)
        draws, logliks = [], []
        for ln in keep:
            d = json.loads(ln)
            draws.append(DrawRecord.from_dict(d))
            logliks.append(np.asarray(d["loglik"], float))
        return draws, logliks

    # -------------------------------------------------------------- reading

    def read(self, require_footer=True):
        """Load (header, ChainSamples) from disk."""
        header, draws, logliks, footer = None, [], [], None
        with open(self.path) as fh:
            for line in fh:
                d = json.loads(line)
                kind = d.get("kind")
                if kind == "header":
                    header = d
                elif kind == "draw":
                    draws.append(DrawRecord.from_dict(d))
                    logliks.append(np.asarray(d["loglik"], float))
                elif kind == "footer":
                    footer = d
        if header is None:
            raise IncompleteStore(f"{self.path}: no header record")
        if require_footer and footer is None:
            raise IncompleteStore(f"{self.path}: chain did not complete (no footer)")
        samples = ChainSamples(
            draws=draws,
            pointwise_loglik=np.array(logliks) if logliks else np.empty((0, header["total_visits"])),
            acceptance_rates=(footer or {}).get("acceptance_rates", {}),
            meta=header,
        )
        return header, samples


def read_store(path, require_footer=True):
    return SampleStore(path).read(require_footer=require_footer)


def merge_chain_samples(samples_list):
    """Concatenate retained draws from several chains over one dataset;
    keeps per-chain boundaries in meta for split-chain diagnostics."""
    base = samples_list[0]
    draws, loglik = [], []
    sizes = []
    for s in samples_list:
        draws.extend(s.draws)
        loglik.append(s.pointwise_loglik)
        sizes.append(s.n_draws)
    merged = ChainSamples(
        draws=draws,
        pointwise_loglik=np.concatenate(loglik, axis=0),
        acceptance_rates=base.acceptance_rates,
        meta=dict(base.meta, chain_sizes=sizes),
    )
    return merged
