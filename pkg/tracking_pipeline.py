"""
KAM-SORT パイプライン
検出ファイルからの追跡・評価・統計・シミュレーション・パラメータスイープを
コマンドラインから実行する
"""

import argparse
import csv
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml
from tqdm import tqdm

from errors import (ConfigurationError, EvaluationError, FileFormatError, FileOperationError,
                    KamSortError, NumericalError, SequenceError)
from metrics import DatasetStats, EvalReport, aggregate_reports, dataset_stats, evaluate
from mot_io import (MotRow, embedding_rows_of, read_annotations, read_detections,
                    read_embedding_rows, read_embeddings, read_mot, resolve_track_path,
                    rows_from_tracks, write_detections, write_embeddings, write_json, write_mot)
from simulate import Scenario, ScenarioSpec, generate
from tracker import Detection, Tracker, TrackerConfig, TrackRow, group_by_frame

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["mode", "theta", "alpha", "hota", "mota", "idf1", "deta", "assa", "error"]
DEFAULT_CONFIG_PATH = Path(__file__).parent / "configs" / "kamsort.yaml"


def setup_logging(verbose: bool = False) -> None:
    """ログの設定"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


@dataclass
class SequenceSummary:
    """1シーケンスの追跡結果の要約"""
    name: str
    tracks_created: int
    frames: int
    wall_time: float
    rows: List[TrackRow] = field(default_factory=list, repr=False)


@dataclass
class RunConfig:
    """実行設定（トラッカー設定と入出力パス）"""
    tracker: TrackerConfig
    det_path: Optional[Path] = None
    emb_path: Optional[Path] = None
    out_path: Optional[Path] = None
    sequences: List[Path] = field(default_factory=list)
    workers: int = 1

    def validate(self) -> None:
        """参照するパスが存在するか実行前に確認する"""
        paths = [self.det_path] if self.det_path is not None else []
        paths += [seq / "det.txt" for seq in self.sequences]
        for path in paths:
            if not path.is_file():
                raise FileOperationError(f"入力ファイルが見つかりません: {path}")
        if self.workers < 1:
            raise ConfigurationError(f"workers は1以上である必要があります: {self.workers}")


class FileManager:
    """ファイル管理"""

    def __init__(self, output_dir: str = "kamsort_output"):
        try:
            self.output_dir = Path(output_dir)
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except Exception as e:
            raise FileOperationError(f"出力ディレクトリの作成に失敗: {e}")

    def resolve(self, path: Path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.output_dir / path

    def save_report(self, report: EvalReport, report_path: Path) -> Tuple[Path, Path]:
        """JSONレポートと key-value のテキストレポートを保存"""
        json_path = self.resolve(report_path)
        text_path = json_path.with_suffix(".txt")
        write_json(report.to_dict(), json_path)
        try:
            with open(text_path, "w", encoding="utf-8") as f:
                f.write("\n".join(report.summary_lines()) + "\n")
        except OSError as e:
            raise FileOperationError(f"テキストレポートの保存に失敗: {e}") from e
        return json_path, text_path

    def save_stats(self, stats: DatasetStats, out_path: Path) -> Path:
        """データセット統計量を保存"""
        path = self.resolve(out_path)
        write_json(stats.to_dict(), path)
        return path

    def save_scenario(self, scenario: Scenario, out_dir: Path) -> Path:
        """シナリオを gt.txt, det.txt, emb.csv, scenario.json として保存"""
        out_dir = self.resolve(out_dir)
        write_mot(scenario.gt, out_dir / "gt.txt")
        write_detections(scenario.detections, out_dir / "det.txt")
        write_embeddings(embedding_rows_of(scenario.detections), out_dir / "emb.csv")
        write_json(scenario.spec.to_dict(), out_dir / "scenario.json")
        return out_dir

    def save_sweep(self, rows: Sequence[Dict[str, Any]], out_path: Path) -> Path:
        """スイープ結果をCSVで保存"""
        path = self.resolve(out_path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
                writer.writeheader()
                for row in rows:
                    writer.writerow(row)
        except OSError as e:
            raise FileOperationError(f"スイープ結果の保存に失敗: {e}") from e
        return path


def load_detections(det_path: Path, emb_path: Optional[Path], config: TrackerConfig) -> List[Detection]:
    """検出と（あれば）埋め込みを読み込む"""
    detections = read_detections(det_path)
    if emb_path is not None and Path(emb_path).is_file():
        return read_embeddings(emb_path, detections)
    if config.use_appearance:
        message = f"埋め込みファイルがないため動きのみで追跡します: {emb_path or '(未指定)'}"
        print(f"警告: {message}")
        logger.warning(message)
    return detections


def track_detections(detections: Sequence[Detection], config: TrackerConfig,
                     name: str = "sequence") -> SequenceSummary:
    """検出列を追跡して要約を返す"""
    start = time.perf_counter()
    tracker = Tracker(config)
    grouped = group_by_frame(detections)
    rows: List[TrackRow] = []
    frames = 0
    if grouped:
        for frame in range(min(grouped), max(grouped) + 1):
            rows.extend(tracker.step(frame, grouped.get(frame, [])).emitted)
            frames += 1
    return SequenceSummary(name=name, tracks_created=tracker.created, frames=frames,
                           wall_time=time.perf_counter() - start, rows=rows)


def _track_sequence_job(args: Tuple[Path, Path, Dict[str, Any]]) -> Tuple[str, int, int, float]:
    seq_dir, out_path, config_dict = args
    config = TrackerConfig.from_dict(config_dict)
    emb_path = seq_dir / "emb.csv"
    detections = load_detections(seq_dir / "det.txt", emb_path if emb_path.is_file() else None, config)
    summary = track_detections(detections, config, seq_dir.name)
    write_mot(rows_from_tracks(summary.rows), out_path)
    return summary.name, summary.tracks_created, summary.frames, summary.wall_time


def _sweep_cell_job(args: Tuple[str, float, float, Dict[str, Any], List[Detection], List[MotRow]]) -> Dict[str, Any]:
    mode, theta, alpha, base, detections, gt = args
    row: Dict[str, Any] = {"mode": mode, "theta": theta, "alpha": alpha,
                           "hota": "", "mota": "", "idf1": "", "deta": "", "assa": "", "error": ""}
    try:
        config = TrackerConfig.from_dict({**base, "mode": mode, "theta": theta, "alpha": alpha})
        summary = track_detections(detections, config)
        report = evaluate(gt, rows_from_tracks(summary.rows))
        row.update(hota=report.hota, mota=report.mota, idf1=report.idf1,
                   deta=report.deta, assa=report.assa)
    except Exception as e:
        row["error"] = f"{type(e).__name__}: {e}"
    return row


class TrackingPipeline:
    """メインパイプライン"""

    def __init__(self, config: Optional[TrackerConfig] = None, output_dir: str = "."):
        self.config = config or TrackerConfig()
        self.file_manager = FileManager(output_dir)

    def track_file(self, det_path: Path, emb_path: Optional[Path], out_path: Path) -> SequenceSummary:
        """1シーケンスを追跡してMOTファイルに書き出す"""
        detections = load_detections(Path(det_path), emb_path, self.config)
        summary = track_detections(detections, self.config, Path(det_path).stem)
        write_mot(rows_from_tracks(summary.rows), self.file_manager.resolve(out_path))
        return summary

    def track_sequences(self, sequences: Sequence[Path], out_dir: Path,
                        workers: int = 1) -> List[SequenceSummary]:
        """複数シーケンスをプロセス単位で並列に追跡する"""
        out_dir = self.file_manager.resolve(out_dir)
        jobs = [(Path(seq), out_dir / f"{Path(seq).name}.txt", self.config.to_dict()) for seq in sequences]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_track_sequence_job, jobs))
        else:
            results = [_track_sequence_job(job) for job in jobs]
        return [SequenceSummary(*r) for r in results]

    def evaluate_files(self, gt_path: Path, pred_path: Path) -> EvalReport:
        """正解ファイルと予測ファイルを評価"""
        return evaluate(read_mot(gt_path), read_mot(pred_path))

    def evaluate_query(self, annotation_path: Path, query_id: int, pred_path: Path) -> EvalReport:
        """アノテーションのクエリの正解で評価"""
        _, queries = read_annotations(annotation_path)
        for query in queries:
            if query.id == query_id:
                return self.evaluate_files(resolve_track_path(annotation_path, query), pred_path)
        raise ConfigurationError(f"クエリ id={query_id} がアノテーションにありません: {annotation_path}")

    def evaluate_dirs(self, gt_dir: Path, pred_dir: Path) -> Tuple[Dict[str, EvalReport], EvalReport]:
        """<gt_dir>/<seq>/gt.txt と <pred_dir>/<seq>.txt の組を評価して集計"""
        reports: Dict[str, EvalReport] = {}
        for seq_dir in sorted(p for p in Path(gt_dir).iterdir() if (p / "gt.txt").is_file()):
            pred_path = Path(pred_dir) / f"{seq_dir.name}.txt"
            if not pred_path.is_file():
                raise FileOperationError(f"予測ファイルが見つかりません: {pred_path}")
            reports[seq_dir.name] = self.evaluate_files(seq_dir / "gt.txt", pred_path)
        if not reports:
            raise EvaluationError(f"評価するシーケンスがありません: {gt_dir}")
        return reports, aggregate_reports(list(reports.values()))

    def compute_stats(self, gt_path: Path, emb_path: Optional[Path],
                      frame_size: Tuple[int, int]) -> DatasetStats:
        """正解ファイルのデータセット統計量。埋め込みは正解ファイルの行順に対応付ける"""
        gt = read_mot(gt_path)
        embeddings = None
        if emb_path is not None:
            rows = read_embedding_rows(emb_path)
            embeddings = {}
            counters: Dict[int, int] = {}
            for r in gt:
                idx = counters.get(r.frame, 0)
                counters[r.frame] = idx + 1
                vec = rows.get(r.frame, {}).get(idx)
                if vec is not None:
                    embeddings[(r.frame, r.id)] = vec
        return dataset_stats(gt, frame_size, embeddings)

    def simulate(self, spec_path: Path, out_dir: Path) -> Path:
        """シナリオ仕様からシーンを生成して保存"""
        spec = ScenarioSpec.from_file(spec_path)
        return self.file_manager.save_scenario(generate(spec), out_dir)

    def sweep(self, grid_path: Path, out_dir: Path, workers: int = 1) -> Tuple[Path, List[Dict[str, Any]]]:
        """mode × θ × α のグリッドで追跡・評価を行いCSVに1セル1行で書き出す"""
        grid = load_sweep_grid(grid_path)
        if "sequence" in grid:
            seq_dir = Path(grid["sequence"])
            if not seq_dir.is_absolute():
                seq_dir = Path(grid_path).parent / seq_dir
            gt = read_mot(seq_dir / "gt.txt")
            emb_path = seq_dir / "emb.csv"
            detections = read_detections(seq_dir / "det.txt")
            if emb_path.is_file():
                detections = read_embeddings(emb_path, detections)
        else:
            scenario = generate(ScenarioSpec.from_dict(grid.get("scenario", {})))
            gt, detections = scenario.gt, scenario.detections

        base = {**self.config.to_dict(), **grid.get("tracker", {})}
        cells = list(itertools.product(grid["modes"], grid["theta"], grid["alpha"]))
        jobs = [(mode, theta, alpha, base, detections, gt) for mode, theta, alpha in cells]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(tqdm(pool.map(_sweep_cell_job, jobs), total=len(jobs), desc="sweep"))
        else:
            rows = [_sweep_cell_job(job) for job in tqdm(jobs, desc="sweep")]
        path = self.file_manager.save_sweep(rows, Path(out_dir) / "sweep.csv")
        return path, rows


def load_sweep_grid(path: Path) -> Dict[str, Any]:
    """スイープのグリッド定義を読み込む"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        raise FileOperationError(f"グリッド定義を開けません: {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"グリッド定義のYAMLが不正です: {path}: {e}") from e
    grid = data.get("sweep", data) if isinstance(data, dict) else None
    if not isinstance(grid, dict):
        raise ConfigurationError(f"グリッド定義の形式が不正です: {path}")
    grid.setdefault("modes", ["kamsort"])
    for key in ("modes", "theta", "alpha"):
        if not isinstance(grid.get(key), list) or not grid[key]:
            raise ConfigurationError(f"グリッド定義の '{key}' は空でないリストである必要があります")
    for key in ("theta", "alpha"):
        bad = [v for v in grid[key] if isinstance(v, bool) or not isinstance(v, (int, float))]
        if bad:
            raise ConfigurationError(f"グリッド定義の '{key}' に数値でない値があります: {bad}")
        grid[key] = [float(v) for v in grid[key]]
    if not isinstance(grid.get("tracker", {}), dict):
        raise ConfigurationError("グリッド定義の 'tracker' はマッピングである必要があります")
    return grid


def print_report(name: str, report: EvalReport) -> None:
    print(f"{name:<20} HOTA {report.hota:.4f}  DetA {report.deta:.4f}  AssA {report.assa:.4f}  "
          f"MOTA {report.mota:.4f}  IDF1 {report.idf1:.4f}  IDSW {report.idsw}")


def build_tracker_config(args: argparse.Namespace) -> TrackerConfig:
    """設定ファイルとコマンドライン引数からトラッカー設定を作る"""
    if args.config:
        config = TrackerConfig.from_yaml(args.config)
    elif DEFAULT_CONFIG_PATH.is_file():
        config = TrackerConfig.from_yaml(DEFAULT_CONFIG_PATH)
    else:
        config = TrackerConfig()
    overrides = {
        "mode": args.mode, "theta": args.theta_deg, "alpha": args.alpha, "lam": args.lam,
        "gamma": args.gamma, "c_min": args.c_min, "c_max": args.c_max,
        "max_age": args.max_age, "min_hits": args.min_hits, "det_conf_threshold": args.det_conf,
        "iou_match_threshold": args.iou_threshold,
        "second_stage_iou_threshold": args.second_iou_threshold,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(config, **overrides)
    except TypeError as e:
        raise ConfigurationError(f"設定値が不正です: {e}") from e


def _add_tracker_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="トラッカー設定のYAMLファイル")
    parser.add_argument("--mode", choices=["sort", "ocsort", "kamsort", "kamsort_no_kpp",
                                           "kamsort_fixed_weights"], help="追跡モード")
    parser.add_argument("--theta-deg", type=float, help="類似度しきい値角 θ（度）")
    parser.add_argument("--alpha", type=float, help="不確かさ補正パラメータ α")
    parser.add_argument("--lambda", dest="lam", type=float, help="速度方向コストの重み λ")
    parser.add_argument("--gamma", type=float, help="固定重みモードの外観重み γ")
    parser.add_argument("--c-min", type=float, help="Kalman++ の下限 c_min")
    parser.add_argument("--c-max", type=float, help="Kalman++ の上限 c_max")
    parser.add_argument("--max-age", type=int, help="ロスト状態を保持する最大フレーム数")
    parser.add_argument("--min-hits", type=int, help="確定に必要な検出回数")
    parser.add_argument("--det-conf", type=float, help="検出の信頼度しきい値")
    parser.add_argument("--iou-threshold", type=float, help="第1段のIoUしきい値")
    parser.add_argument("--second-iou-threshold", type=float, help="第2段のIoUしきい値")


class CommandLineParser(argparse.ArgumentParser):
    """引数の誤りを ConfigurationError として送出するパーサー（終了コード1）"""

    def error(self, message: str):
        raise ConfigurationError(f"引数が不正です: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(description="KAM-SORT 追跡ツールキット")
    parser.add_argument("--verbose", action="store_true", help="デバッグログを表示")
    sub = parser.add_subparsers(dest="command", required=True)

    track = sub.add_parser("track", help="検出ファイルを追跡")
    track.add_argument("--dets", help="検出ファイル (MOT形式)")
    track.add_argument("--embs", help="埋め込みCSV")
    track.add_argument("--out", help="出力するトラックファイル")
    track.add_argument("--sequences", help="<seq>/det.txt を含むディレクトリ")
    track.add_argument("--out-dir", help="複数シーケンスの出力ディレクトリ")
    track.add_argument("--workers", type=int, default=1, help="並列プロセス数")
    _add_tracker_options(track)

    ev = sub.add_parser("eval", help="追跡結果を評価")
    ev.add_argument("--gt", help="正解ファイル")
    ev.add_argument("--pred", help="予測ファイル")
    ev.add_argument("--annotations", help="アノテーションJSON（--query-id と併用）")
    ev.add_argument("--query-id", type=int, help="評価するクエリのid")
    ev.add_argument("--gt-dir", help="<seq>/gt.txt を含むディレクトリ")
    ev.add_argument("--pred-dir", help="<seq>.txt を含むディレクトリ")
    ev.add_argument("--report", required=True, help="JSONレポートの出力先")

    st = sub.add_parser("stats", help="データセット統計量を計算")
    st.add_argument("--gt", required=True, help="正解ファイル")
    st.add_argument("--embs", help="正解の行順に対応する埋め込みCSV")
    st.add_argument("--frame-size", type=int, nargs=2, required=True, metavar=("W", "H"))
    st.add_argument("--out", required=True, help="出力するJSONファイル")

    sim = sub.add_parser("simulate", help="合成シーンを生成")
    sim.add_argument("--spec", required=True, help="シナリオ仕様 (YAML/JSON)")
    sim.add_argument("--out-dir", required=True, help="出力ディレクトリ")

    sw = sub.add_parser("sweep", help="θ × α × mode のスイープ")
    sw.add_argument("--grid", required=True, help="グリッド定義のYAML")
    sw.add_argument("--out-dir", required=True, help="出力ディレクトリ")
    sw.add_argument("--workers", type=int, default=1, help="並列プロセス数")
    _add_tracker_options(sw)
    return parser


def cmd_track(args: argparse.Namespace) -> None:
    config = build_tracker_config(args)
    pipeline = TrackingPipeline(config)
    if args.sequences:
        if not args.out_dir:
            raise ConfigurationError("--sequences には --out-dir が必要です")
        seq_root = Path(args.sequences)
        if not seq_root.is_dir():
            raise FileOperationError(f"シーケンスディレクトリが見つかりません: {seq_root}")
        sequences = sorted(p for p in seq_root.iterdir() if (p / "det.txt").is_file())
        run = RunConfig(tracker=config, sequences=sequences, out_path=Path(args.out_dir),
                        workers=args.workers)
        run.validate()
        summaries = pipeline.track_sequences(run.sequences, run.out_path, run.workers)
    else:
        if not args.dets or not args.out:
            raise ConfigurationError("--dets と --out を指定してください")
        run = RunConfig(tracker=config, det_path=Path(args.dets),
                        emb_path=Path(args.embs) if args.embs else None, out_path=Path(args.out))
        run.validate()
        summaries = [pipeline.track_file(run.det_path, run.emb_path, run.out_path)]

    print(f"\n=== 追跡結果 (mode={config.mode}) ===")
    for s in summaries:
        print(f"- {s.name}: トラック {s.tracks_created}個, {s.frames}フレーム, {s.wall_time:.2f}秒")


def cmd_eval(args: argparse.Namespace) -> None:
    pipeline = TrackingPipeline()
    if args.gt_dir:
        if not args.pred_dir:
            raise ConfigurationError("--gt-dir には --pred-dir が必要です")
        reports, overall = pipeline.evaluate_dirs(Path(args.gt_dir), Path(args.pred_dir))
    elif args.annotations:
        if args.query_id is None or not args.pred:
            raise ConfigurationError("--annotations には --query-id と --pred が必要です")
        overall = pipeline.evaluate_query(Path(args.annotations), args.query_id, Path(args.pred))
        reports = {f"query {args.query_id}": overall}
    else:
        if not args.gt or not args.pred:
            raise ConfigurationError("--gt と --pred を指定してください")
        overall = pipeline.evaluate_files(Path(args.gt), Path(args.pred))
        reports = {Path(args.pred).stem: overall}

    print("\n=== 評価結果 ===")
    for name, report in reports.items():
        print_report(name, report)
    if len(reports) > 1:
        print_report("COMBINED", overall)
    json_path, text_path = pipeline.file_manager.save_report(overall, Path(args.report))
    print(f"レポート: {json_path}, {text_path}")


def cmd_stats(args: argparse.Namespace) -> None:
    pipeline = TrackingPipeline()
    stats = pipeline.compute_stats(Path(args.gt), Path(args.embs) if args.embs else None,
                                   tuple(args.frame_size))
    path = pipeline.file_manager.save_stats(stats, Path(args.out))
    print("\n=== データセット統計量 ===")
    for key, value in stats.to_dict().items():
        if value is None:
            print(f"- {key}: なし")
        else:
            print(f"- {key}: {value['mean']:.4f} ± {value['std']:.4f}")
    print(f"出力: {path}")


def cmd_simulate(args: argparse.Namespace) -> None:
    pipeline = TrackingPipeline()
    out_dir = pipeline.simulate(Path(args.spec), Path(args.out_dir))
    print(f"シナリオを出力しました: {out_dir}")


def cmd_sweep(args: argparse.Namespace) -> None:
    pipeline = TrackingPipeline(build_tracker_config(args))
    path, rows = pipeline.sweep(Path(args.grid), Path(args.out_dir), args.workers)
    failed = sum(1 for r in rows if r["error"])
    print(f"\n=== スイープ結果: {len(rows)}セル (失敗 {failed}) ===")
    for r in rows:
        if r["error"]:
            print(f"- {r['mode']} θ={r['theta']} α={r['alpha']}: エラー {r['error']}")
        else:
            print(f"- {r['mode']} θ={r['theta']} α={r['alpha']}: HOTA {r['hota']:.4f} IDF1 {r['idf1']:.4f}")
    print(f"出力: {path}")


COMMANDS = {
    "track": cmd_track,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン実行"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        setup_logging(args.verbose)
        COMMANDS[args.command](args)
        return 0
    except NumericalError as e:
        print(f"エラー: 数値計算に失敗しました: {e}")
        sys.exit(2)
    except (FileFormatError, SequenceError) as e:
        print(f"エラー: 入力ファイルの形式が不正です: {e}")
        sys.exit(1)
    except FileOperationError as e:
        print(f"エラー: ファイル操作に失敗しました: {e}")
        sys.exit(1)
    except EvaluationError as e:
        print(f"エラー: 評価できません: {e}")
        sys.exit(1)
    except ConfigurationError as e:
        print(f"エラー: 設定に問題があります: {e}")
        sys.exit(1)
    except KamSortError as e:
        print(f"エラー: 予期せぬエラーが発生しました: {e}")
        sys.exit(1)
    except Exception as e:
        print(f"エラー: 予期せぬエラーが発生しました: {e}")
        sys.exit(1)


if __name__ == "__main__":
    sys.exit(main())
