""" Stage 3 storage: successful adversarial initial latents, optionally backed by a JSONL file """
import json
import logging
import os
import threading
from collections import defaultdict
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pytz

from schema.records import POOL_FORMAT_VERSION, PoolEntry


class EmptyPoolError(LookupError):
    """ No pool entry satisfies the sampling policy """


def now_iso() -> str:
    return datetime.now(pytz.utc).isoformat()


class LatentPool:
    """ Single writer, many readers; appends to the backing file are serialized by a lock """

    def __init__(self, path: Optional[str] = None, data_dim: Optional[int] = None,
                 concepts: Optional[Sequence[str]] = None):
        self.path = path
        self.data_dim = data_dim
        self.concepts = list(concepts) if concepts is not None else None
        self.entries: List[PoolEntry] = []
        self.index: Dict[str, List[int]] = defaultdict(list)
        self._keys: Set[Tuple] = set()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, entry: PoolEntry) -> bool:
        return self.key_of(entry) in self._keys

    @staticmethod
    def key_of(entry: PoolEntry) -> Tuple:
        """ Same victim, same concept, same latent coordinates """
        return entry.victim_id, entry.concept, tuple(entry.latent)

    @classmethod
    def load(cls, path: str, data_dim: Optional[int] = None, concepts: Optional[Sequence[str]] = None) -> "LatentPool":
        """ Open a file-backed pool; a missing file starts an empty pool at that path """
        pool = cls(path, data_dim, concepts)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    entry = PoolEntry(**json.loads(line))
                    if entry.format_version != POOL_FORMAT_VERSION:
                        raise ValueError(f"{path}:{line_no}: unsupported pool format_version {entry.format_version}")
                    pool._validate(entry)
                    pool._append(entry)
            logging.info(f"[POOL] loaded {len(pool)} entries from {path}")
        return pool

    def _validate(self, entry: PoolEntry):
        if self.data_dim is None:
            self.data_dim = len(entry.latent)
        elif len(entry.latent) != self.data_dim:
            raise ValueError(f"latent dimension {len(entry.latent)} does not match pool dimension {self.data_dim}")
        if self.concepts is not None and entry.concept not in self.concepts:
            raise ValueError(f"concept {entry.concept!r} not in pool vocabulary {self.concepts}")

    def _append(self, entry: PoolEntry):
        self.index[entry.concept].append(len(self.entries))
        self.entries.append(entry)
        self._keys.add(self.key_of(entry))

    def _write(self, entry: PoolEntry):
        # caller holds self._lock
        self._validate(entry)
        if self.path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry.model_dump()) + "\n")
        self._append(entry)

    def store(self, entry: PoolEntry) -> "LatentPool":
        with self._lock:
            self._write(entry)
        logging.debug(f"[POOL] stored latent for {entry.concept!r} from {entry.victim_id} (size {len(self)})")
        return self

    def store_new(self, entry: PoolEntry) -> bool:
        """ Store unless the pool already holds this latent for the same victim and concept """
        with self._lock:
            if self.key_of(entry) in self._keys:
                logging.debug(f"[POOL] latent for {entry.concept!r} from {entry.victim_id} already stored")
                return False
            self._write(entry)
        logging.debug(f"[POOL] stored latent for {entry.concept!r} from {entry.victim_id} (size {len(self)})")
        return True

    def candidates(self, concept: str, policy: str = "matching") -> List[int]:
        if policy == "matching":
            return list(self.index.get(concept, []))
        if policy == "any":
            return list(range(len(self.entries)))
        raise ValueError(f"unknown pool policy {policy!r}")

    def sample(self, concept: str, policy: str = "matching",
               rng: Optional[np.random.Generator] = None) -> PoolEntry:
        cands = self.candidates(concept, policy)
        if not cands:
            raise EmptyPoolError(f"no pool entries for concept {concept!r} under policy {policy!r}")
        rng = rng if rng is not None else np.random.default_rng()
        return self.entries[cands[int(rng.integers(len(cands)))]]


def pool_store(pool: LatentPool, entry: PoolEntry) -> LatentPool:
    return pool.store(entry)


def pool_sample(pool: LatentPool, concept: str, policy: str = "matching",
                rng: Optional[np.random.Generator] = None) -> PoolEntry:
    return pool.sample(concept, policy, rng)
