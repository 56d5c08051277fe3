"""Session fixtures: the on-disk VOC corpus and its loaded manifest."""

from __future__ import annotations

import pytest

from helpers import NOVEL_CLASSES, build_corpus

from ctxforge.manifest import load_voc


@pytest.fixture(scope="session")
def voc_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root)
    return root


@pytest.fixture(scope="session")
def corpus(voc_root):
    return load_voc(voc_root, novel_classes=NOVEL_CLASSES)
