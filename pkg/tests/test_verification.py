import pytest

from src.modules.verification import RESULT_COLUMNS, DeskScale, random_ugv_instance, run_verification

SMALL = DeskScale(identity=6, triangulation=6, gradient=2, distributed=1, power=1, psd=4, max_tags=4)


def test_fim_and_psd_suites_pass():
    """FIM 恒等式と PSD 順序の検査が小さな規模で成功することを確認"""
    report = run_verification(seed=5, scale=SMALL, suites=["fim_identity", "psd_ordering"])
    names = [result.name for result in report.results]
    assert names == ["fim_rigidity_identity", "kernel_equivalence", "psd_unconstrained_vs_D", "psd_D_vs_RP"], \
        "検査名が不正です"
    assert report.passed, f"検査が失敗しました: {[r.name for r in report.failures()]}"
    assert list(report.frame().columns) == RESULT_COLUMNS, "結果表の列が不正です"
    assert report.as_dict()["seed"] == 5, "シードが記録されていません"


def test_verification_is_reproducible():
    """同じシードで同じ誤差が得られることを確認"""
    first = run_verification(seed=2, scale=SMALL, suites=["triangulation"])
    second = run_verification(seed=2, scale=SMALL, suites=["triangulation"])
    assert [r.error for r in first.results] == [r.error for r in second.results], "結果が再現しません"


def test_unknown_suite_raises():
    """未知の検査スイートがエラーになることを確認"""
    with pytest.raises(ValueError):
        run_verification(suites=["nonexistent"])


def test_random_ugv_instance_is_feasible(rng):
    """乱数 UGV インスタンスのタグ間距離が搭載位置と一致することを確認"""
    instance = random_ugv_instance(rng)
    (group,) = instance.groups
    distance = float(((instance.positions[0] - instance.positions[1]) ** 2).sum() ** 0.5)
    assert distance == pytest.approx(group.target_distance(0, 1)), "タグ間距離が剛体制約を満たしません"
    assert "groups" in instance.describe(), "再現用の記述に剛体グループがありません"
