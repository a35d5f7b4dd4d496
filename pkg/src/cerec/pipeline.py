"""Raw data -> filtered CKG with dense train/valid/test splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .ckg import (
    CollabKG,
    InteractionSet,
    apply_k_core,
    build_ckg,
    filter_infrequent,
    remap_interactions,
    split_interactions,
)
from .config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    ckg: CollabKG
    train: InteractionSet  # dense ids
    valid: InteractionSet
    test: InteractionSet
    raw_interactions: InteractionSet
    triples: list


def preprocess(interactions: InteractionSet, triples: list, alignment: dict, cfg: RunConfig):
    """k-core the interactions and frequency-filter the triples."""
    inter = apply_k_core(interactions, cfg.kcore)
    kept_items = set(inter.items())
    item_entities = {alignment[i] for i in kept_items if i in alignment}
    all_item_entities = set(alignment.values())
    # triples touching items dropped by the k-core are not part of the graph
    triples = [t for t in triples
               if not ((t.head in all_item_entities and t.head not in item_entities)
                       or (t.tail in all_item_entities and t.tail not in item_entities))]
    triples = filter_infrequent(triples, cfg.entity_min, cfg.relation_min, protected=item_entities)
    logger.info("preprocess: %d -> %d interactions, %d triples", len(interactions), len(inter), len(triples))
    return inter, triples


def prepare_dataset(interactions: InteractionSet, triples: list, alignment: dict, cfg: RunConfig,
                    seed: int | None = None, filtered: bool = False) -> Dataset:
    if not filtered:
        interactions, triples = preprocess(interactions, triples, alignment, cfg)
    ckg = build_ckg(interactions, triples, alignment)
    dense = remap_interactions(ckg, interactions)
    train, valid, test = split_interactions(dense, tuple(cfg.split), cfg.seed if seed is None else seed)
    # held-out interactions stay out of the graph
    raw_train = raw_pairs(ckg, train)
    ckg = build_ckg(interactions, triples, alignment, edges=raw_train)
    return Dataset(ckg, train, valid, test, interactions, triples)



def dataset_from_splits(train_raw: InteractionSet, valid_raw: InteractionSet, test_raw: InteractionSet,
                        triples: list, alignment: dict) -> Dataset:
    """Dataset from already filtered and split raw-id interactions."""
    everything = InteractionSet.of(list(train_raw) + list(valid_raw) + list(test_raw))
    ckg = build_ckg(everything, triples, alignment, edges=train_raw)
    return Dataset(ckg, remap_interactions(ckg, train_raw), remap_interactions(ckg, valid_raw),
                   remap_interactions(ckg, test_raw), everything, triples)


def raw_pairs(ckg: CollabKG, dense: InteractionSet) -> InteractionSet:
    return InteractionSet.of((int(ckg.user_ids[u]), int(ckg.item_ids[i])) for u, i in dense)
