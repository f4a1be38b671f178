"""
ローカライザビリティポテンシャル シミュレータ

シナリオの実行（run）、性質検査（verify）、UGV シナリオのモンテカルロ評価（montecarlo）を行う
コマンドラインのエントリポイントです。

    python -m src.main run --config config/scenarios/inspection.yaml --out data/output/inspection
    python -m src.main verify --seed 3
    python -m src.main montecarlo --config config/scenarios/ugv.yaml --trials 500

終了コード: 0 成功、1 検査・実行の失敗、2 設定エラー
"""

import argparse
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from src.modules.scenarios import run_scenario, run_ugv_scenario
from src.modules.verification import DeskScale, run_verification
from src.utils.environment import EnvironmentUtils as env
from src.utils.exceptions import ConfigurationError, LocalizabilityError
from src.utils.exporter import export_trace, write_csv, write_json, write_yaml
from src.utils.logging_config import LoggingConfig, get_logger
from src.utils.scenario_config import ScenarioConfig, default_config, parse_config, serialize_config

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

# 公表値（MSE₀, MSE_F）[m²]
TABLE_REFERENCE = {"D": (4.28, 0.93), "RP": (2.97, 0.63)}
TABLE_COLUMNS = [
    "mode", "trials", "mse_initial", "b_minus_initial", "b_plus_initial",
    "mse_final", "b_minus_final", "b_plus_final",
    "reference_initial", "reference_final", "deviation_initial", "deviation_final",
]
QUICK_SCALE = DeskScale(identity=10, triangulation=10, gradient=4, distributed=1, power=1, psd=5, max_tags=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ローカライザビリティポテンシャル シミュレータ")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=str, default=None, help="シナリオ設定（YAML）")
        sub.add_argument("--seed", type=int, default=None, help="乱数シード（設定の seed を上書き）")
        sub.add_argument("--out", type=str, default=None, help="出力ディレクトリ")
        sub.add_argument("--verbose", action="store_true", help="DEBUG ログを表示")

    run = subparsers.add_parser("run", help="シナリオを実行")
    common(run)
    run.add_argument("--scenario", choices=["inspection", "ugv"], default=None)
    run.add_argument("--mode", choices=["D", "RP"], default=None, help="UGV シナリオの制約")

    verify = subparsers.add_parser("verify", help="性質検査を実行")
    common(verify)
    verify.add_argument("--suite", action="append", default=None, help="実行する検査スイート（複数指定可）")
    verify.add_argument("--quick", action="store_true", help="インスタンス数を減らして実行")

    montecarlo = subparsers.add_parser("montecarlo", help="UGV シナリオのモンテカルロ評価")
    common(montecarlo)
    montecarlo.add_argument("--mode", choices=["D", "RP"], default=None, help="省略時は D と RP の両方")
    montecarlo.add_argument("--trials", type=int, default=None, help="試行回数 M（省略時は table_trials）")
    return parser


def load_config(path: Optional[str], scenario: Optional[str] = None, seed: Optional[int] = None) -> ScenarioConfig:
    """
    設定ファイル（省略時はシナリオの既定値）を読み込み、コマンドラインの指定を反映します。

    Raises:
        ConfigurationError: 設定が不正な場合、または --scenario が設定ファイルと矛盾する場合
    """
    if path is None:
        config = default_config(scenario or "inspection")
    else:
        config = parse_config(env.resolve_path(path))
        if scenario is not None and scenario != config.scenario.name:
            raise ConfigurationError(
                f"--scenario {scenario} が設定ファイルのシナリオ {config.scenario.name} と一致しません", "scenario.name"
            )
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def output_directory(config: ScenarioConfig, out: Optional[str], command: str) -> Path:
    if out is not None:
        directory = env.resolve_path(out)
    elif config.output.directory:
        directory = env.resolve_path(config.output.directory)
    else:
        directory = env.get_output_dir() / command
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.scenario, args.seed)
    directory = output_directory(config, args.out, "run")
    write_yaml(serialize_config(config), directory / "effective_config.yaml")

    print(f"シナリオ {config.scenario.name} を実行します (seed={config.seed})")
    trace = run_scenario(config, args.mode)
    files = export_trace(trace, directory, config.output.float_format)

    summary = trace.summary
    if trace.name == "inspection":
        print(f"J: {summary['J_loc_initial']:.6g} → {summary['J_loc_final']:.6g}")
    else:
        print(f"J_c ({summary['mode']}): {summary['J_c_initial']:.6g} → {summary['J_c_final']:.6g}")
        if "mse_initial" in summary:
            print(f"MSE: {summary['mse_initial']:.4f} → {summary['mse_final']:.4f} m²")
    for path in files:
        print(f"  出力: {path}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    config = load_config(args.config, None, args.seed)
    directory = output_directory(config, args.out, "verify")
    write_yaml(serialize_config(config), directory / "effective_config.yaml")

    scale = QUICK_SCALE if args.quick else DeskScale()
    print(f"性質検査を実行します (seed={config.seed})")
    report = run_verification(config.seed, scale, args.suite)
    for result in report.results:
        status = "PASS" if result.passed else "FAIL"
        print(f"  [{status}] {result.name}: 誤差 {result.error:.3e} (許容 {result.tolerance:.1e}, {result.instances} 件)")

    write_csv(report.frame(), directory / "verify_report.csv", config.output.float_format)
    write_json(report.as_dict(), directory / "verify_report.json")
    if report.passed:
        print("すべての性質を満たしました")
        return EXIT_OK

    failing = {result.name: {"message": result.message, "instance": result.instance} for result in report.failures()}
    path = write_json(failing, directory / "failing_instances.json")
    print(f"{len(failing)} 件の性質が失敗しました。再現用インスタンス: {path}")
    return EXIT_FAILURE


def _deviation(value: float, reference: float) -> float:
    return (value - reference) / reference


def cmd_montecarlo(args: argparse.Namespace) -> int:
    config = load_config(args.config, None if args.config else "ugv", args.seed)
    if config.scenario.name != "ugv":
        raise ConfigurationError("montecarlo は UGV シナリオのみ対応しています", "scenario.name")
    trials = args.trials if args.trials is not None else config.montecarlo.table_trials
    if trials < 2:
        raise ConfigurationError(f"試行回数は 2 以上である必要があります: {trials}", "montecarlo.table_trials")
    config = replace(config, montecarlo=replace(config.montecarlo, enabled=True))
    directory = output_directory(config, args.out, "montecarlo")
    write_yaml(serialize_config(config), directory / "effective_config.yaml")

    modes: Sequence[str] = [args.mode] if args.mode else ["D", "RP"]
    rows: List[Dict[str, Any]] = []
    elapsed: Dict[str, float] = {}
    for mode in modes:
        print(f"モード {mode}: M={trials} でモンテカルロ評価を実行します")
        started = time.perf_counter()
        trace = run_ugv_scenario(config, mode, trials)
        elapsed[mode] = time.perf_counter() - started
        export_trace(trace, directory, config.output.float_format, prefix=mode)

        mse = trace.network_mse
        assert mse is not None
        initial, final = mse.iloc[0], mse.iloc[-1]
        reference_initial, reference_final = TABLE_REFERENCE[mode]
        rows.append({
            "mode": mode, "trials": trials,
            "mse_initial": float(initial["mse"]), "b_minus_initial": float(initial["b_minus"]),
            "b_plus_initial": float(initial["b_plus"]),
            "mse_final": float(final["mse"]), "b_minus_final": float(final["b_minus"]),
            "b_plus_final": float(final["b_plus"]),
            "reference_initial": reference_initial, "reference_final": reference_final,
            "deviation_initial": _deviation(float(initial["mse"]), reference_initial),
            "deviation_final": _deviation(float(final["mse"]), reference_final),
        })

    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    write_csv(table, directory / "montecarlo_table.csv", config.output.float_format)
    write_json({"seed": config.seed, "trials": trials, "table": table.to_dict(orient="records")},
               directory / "montecarlo_summary.json")

    print("\n=== モンテカルロ評価 ===")
    print(f"{'mode':<4} {'MSE0':>10} {'±':>8} {'MSE_F':>10} {'±':>8} {'ref0':>6} {'refF':>6} {'ET[s]':>8}")
    for row in rows:
        mode = str(row["mode"])
        half_initial = (float(row["b_plus_initial"]) - float(row["b_minus_initial"])) / 2.0
        half_final = (float(row["b_plus_final"]) - float(row["b_minus_final"])) / 2.0
        print(f"{mode:<4} {row['mse_initial']:>10.4f} {half_initial:>8.4f} {row['mse_final']:>10.4f} "
              f"{half_final:>8.4f} {row['reference_initial']:>6.2f} {row['reference_final']:>6.2f} {elapsed[mode]:>8.2f}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "montecarlo": cmd_montecarlo}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数"""
    parser = build_parser()
    args = parser.parse_args(argv)
    env.load_env(required=False)
    if args.verbose:
        LoggingConfig.set_level("DEBUG")

    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as e:
        print(f"設定エラー: {e}", file=sys.stderr)
        logger.error("設定エラー: %s", e)
        return EXIT_CONFIG
    except LocalizabilityError as e:
        print(f"エラーが発生しました: {e}", file=sys.stderr)
        logger.error("%s", traceback.format_exc())
        return EXIT_FAILURE
    except Exception as e:
        print(f"予期しないエラーが発生しました: {str(e)}", file=sys.stderr)
        logger.error("%s", traceback.format_exc())
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
