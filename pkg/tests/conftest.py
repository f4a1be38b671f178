# tests/conftest.py

import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートディレクトリをPythonパスに追加
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# src ディレクトリをPYTHONPATHに追加
src_path = project_root / 'src'
if str(src_path) not in sys.path:
    sys.path.insert(0, str(src_path))

from src.modules.constrained import RigidGroup  # noqa: E402
from src.modules.fisher import NoiseModel  # noqa: E402
from src.modules.geometry_graph import build_graph, build_triangulation  # noqa: E402


@pytest.fixture
def rng():
    """シード固定の乱数生成器"""
    return np.random.default_rng(12345)


@pytest.fixture
def additive_noise():
    return NoiseModel("additive", 0.1)


@pytest.fixture
def lognormal_noise():
    return NoiseModel("lognormal", 0.05)


@pytest.fixture
def square_network():
    """タグ 2 台・アンカー 3 台、全タグ対で測距する平面ネットワーク"""
    graph = build_graph(2, 2, 3, [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4)])
    positions = np.array([[1.0, 1.2], [3.1, 2.3], [0.0, 0.0], [4.0, 0.5], [1.5, 4.0]])
    return graph, positions


@pytest.fixture
def triangulation(rng):
    """三角形分割ネットワーク（タグ 5 台、アンカー 3 台）"""
    anchors = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    region = np.array([[0.5, 0.5], [9.5, 9.5]])
    return build_triangulation(2, anchors, 5, region, rng)


@pytest.fixture
def ugv_start():
    """UGV シナリオの初期配置（ロボット中心 (−15, −4)、向き −π/8）"""
    theta = -np.pi / 8
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = np.array([-15.0, -4.0])
    offsets = {0: np.array([1.0, 0.0]), 1: np.array([-1.0, 0.0])}
    tags = [center + rotation @ offsets[t] for t in (0, 1)]
    anchors = np.array([[-5.0, 5.0], [5.0, -5.0], [5.0, 5.0]])
    graph = build_graph(2, 2, 3, [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4)])
    group = RigidGroup(0, (0, 1), offsets)
    return graph, np.vstack([tags, anchors]), group
