"""
追跡評価指標（HOTA, DetA, AssA, MOTA, IDF1）とデータセット特性の統計量

CLEAR / Identity / HOTA の計算手順は TrackEval の定義に合わせている。
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from errors import EvaluationError
from geometry import iou_matrix
from mot_io import MotRow

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
HOTA_ALPHAS = np.arange(0.05, 0.99, 0.05)


@dataclass
class _FrameData:
    gt_ids: np.ndarray
    gt_boxes: np.ndarray
    pred_ids: np.ndarray
    pred_boxes: np.ndarray
    similarity: np.ndarray


@dataclass
class _Sequence:
    """連番に振り直したidとフレームごとの類似度"""
    frames: List[_FrameData]
    num_gt_ids: int
    num_pred_ids: int
    num_gt_dets: int
    num_pred_dets: int


def _check_unique(rows: Sequence[MotRow], name: str) -> None:
    seen = set()
    for r in rows:
        key = (r.frame, r.id)
        if key in seen:
            raise EvaluationError(f"{name} に (frame={r.frame}, id={r.id}) が重複しています")
        seen.add(key)


def _prepare(gt: Sequence[MotRow], pred: Sequence[MotRow]) -> _Sequence:
    if len(gt) == 0:
        raise EvaluationError("正解が空のため評価できません")
    _check_unique(gt, "正解")
    _check_unique(pred, "予測")

    gt_map = {tid: k for k, tid in enumerate(sorted({r.id for r in gt}))}
    pred_map = {tid: k for k, tid in enumerate(sorted({r.id for r in pred}))}
    by_frame: Dict[int, Tuple[List[MotRow], List[MotRow]]] = {}
    for r in gt:
        by_frame.setdefault(r.frame, ([], []))[0].append(r)
    for r in pred:
        by_frame.setdefault(r.frame, ([], []))[1].append(r)

    frames = []
    for frame in sorted(by_frame):
        g, p = by_frame[frame]
        gt_boxes = np.array([r.xywh for r in g], dtype=float).reshape(-1, 4)
        pred_boxes = np.array([r.xywh for r in p], dtype=float).reshape(-1, 4)
        frames.append(_FrameData(
            gt_ids=np.array([gt_map[r.id] for r in g], dtype=int),
            gt_boxes=gt_boxes,
            pred_ids=np.array([pred_map[r.id] for r in p], dtype=int),
            pred_boxes=pred_boxes,
            similarity=iou_matrix(gt_boxes, pred_boxes),
        ))
    return _Sequence(frames, len(gt_map), len(pred_map), len(gt), len(pred))


# ---------------------------------------------------------------------------
# CLEAR
# ---------------------------------------------------------------------------

@dataclass
class ClearResult:
    mota: float
    tp: int
    fp: int
    fn: int
    idsw: int
    num_gt: int


def _clear(seq: _Sequence, iou_threshold: float) -> ClearResult:
    tp = fn = fp = idsw = 0
    prev_id = np.full(seq.num_gt_ids, np.nan)
    prev_step_id = np.full(seq.num_gt_ids, np.nan)
    for fd in seq.frames:
        n_gt, n_pred = len(fd.gt_ids), len(fd.pred_ids)
        if n_gt == 0:
            fp += n_pred
            continue
        if n_pred == 0:
            fn += n_gt
            prev_step_id[:] = np.nan
            continue
        sim = fd.similarity
        # 前フレームの対応を優先する
        continuing = fd.pred_ids[np.newaxis, :] == prev_step_id[fd.gt_ids][:, np.newaxis]
        score = 1000.0 * continuing + sim
        score[sim < iou_threshold - EPS] = 0.0
        rows, cols = linear_sum_assignment(-score)
        keep = score[rows, cols] > EPS
        rows, cols = rows[keep], cols[keep]

        matched_gt = fd.gt_ids[rows]
        matched_pred = fd.pred_ids[cols].astype(float)
        prev = prev_id[matched_gt]
        switched = np.logical_not(np.isnan(prev)) & (matched_pred != prev)
        idsw += int(switched.sum())
        prev_id[matched_gt] = matched_pred
        prev_step_id[:] = np.nan
        prev_step_id[matched_gt] = matched_pred

        tp += len(rows)
        fn += n_gt - len(rows)
        fp += n_pred - len(rows)
    mota = (tp - fp - idsw) / seq.num_gt_dets
    return ClearResult(mota=float(mota), tp=tp, fp=fp, fn=fn, idsw=idsw, num_gt=seq.num_gt_dets)


def eval_clear(gt: Sequence[MotRow], pred: Sequence[MotRow], iou_threshold: float = 0.5) -> ClearResult:
    """CLEAR MOT の MOTA と TP/FP/FN/IDSW"""
    return _clear(_prepare(gt, pred), iou_threshold)


# ---------------------------------------------------------------------------
# Identity
# ---------------------------------------------------------------------------

@dataclass
class IdentityResult:
    idf1: float
    idtp: int
    idfp: int
    idfn: int


def _identity(seq: _Sequence, iou_threshold: float) -> IdentityResult:
    potential = np.zeros((seq.num_gt_ids, seq.num_pred_ids))
    for fd in seq.frames:
        if fd.similarity.size == 0:
            continue
        gi, pj = np.nonzero(fd.similarity >= iou_threshold - EPS)
        np.add.at(potential, (fd.gt_ids[gi], fd.pred_ids[pj]), 1)
    idtp = 0
    if potential.size:
        rows, cols = linear_sum_assignment(potential, maximize=True)
        idtp = int(round(potential[rows, cols].sum()))
    idfn = seq.num_gt_dets - idtp
    idfp = seq.num_pred_dets - idtp
    idf1 = 2 * idtp / max(1, 2 * idtp + idfp + idfn)
    return IdentityResult(idf1=float(idf1), idtp=idtp, idfp=idfp, idfn=idfn)


def eval_idf1(gt: Sequence[MotRow], pred: Sequence[MotRow], iou_threshold: float = 0.5) -> IdentityResult:
    """gtとpredのidを全体で一対一に対応付けた IDF1"""
    return _identity(_prepare(gt, pred), iou_threshold)


# ---------------------------------------------------------------------------
# HOTA
# ---------------------------------------------------------------------------

@dataclass
class AlphaScore:
    """しきい値 alpha ごとのスコアと集計用の生カウント"""
    alpha: float
    hota: float
    deta: float
    assa: float
    tp: int
    fn: int
    fp: int


@dataclass
class HotaResult:
    hota: float
    deta: float
    assa: float
    per_alpha: List[AlphaScore]


def _alpha_score(alpha: float, tp: int, fn: int, fp: int, assa_sum: float) -> AlphaScore:
    deta = tp / max(1, tp + fn + fp)
    assa = assa_sum / max(1, tp)
    return AlphaScore(alpha=float(alpha), hota=float(np.sqrt(deta * assa)), deta=float(deta),
                      assa=float(assa), tp=tp, fn=fn, fp=fp)


def _hota_from_alphas(per_alpha: List[AlphaScore]) -> HotaResult:
    return HotaResult(hota=float(np.mean([a.hota for a in per_alpha])),
                      deta=float(np.mean([a.deta for a in per_alpha])),
                      assa=float(np.mean([a.assa for a in per_alpha])),
                      per_alpha=per_alpha)


def _hota(seq: _Sequence) -> HotaResult:
    n_alpha = len(HOTA_ALPHAS)
    potential = np.zeros((seq.num_gt_ids, seq.num_pred_ids))
    gt_id_count = np.zeros((seq.num_gt_ids, 1))
    pred_id_count = np.zeros((1, seq.num_pred_ids))
    for fd in seq.frames:
        sim = fd.similarity
        if sim.size:
            denom = sim.sum(0)[np.newaxis, :] + sim.sum(1)[:, np.newaxis] - sim
            sim_iou = np.zeros_like(sim)
            mask = denom > EPS
            sim_iou[mask] = sim[mask] / denom[mask]
            potential[fd.gt_ids[:, np.newaxis], fd.pred_ids[np.newaxis, :]] += sim_iou
        gt_id_count[fd.gt_ids] += 1
        pred_id_count[0, fd.pred_ids] += 1

    global_score = potential / np.maximum(gt_id_count + pred_id_count - potential, EPS)

    tp = np.zeros(n_alpha, dtype=int)
    fn = np.zeros(n_alpha, dtype=int)
    fp = np.zeros(n_alpha, dtype=int)
    matches = np.zeros((n_alpha, seq.num_gt_ids, seq.num_pred_ids))
    for fd in seq.frames:
        n_gt, n_pred = len(fd.gt_ids), len(fd.pred_ids)
        if n_gt == 0:
            fp += n_pred
            continue
        if n_pred == 0:
            fn += n_gt
            continue
        sim = fd.similarity
        score = global_score[fd.gt_ids[:, np.newaxis], fd.pred_ids[np.newaxis, :]] * sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(HOTA_ALPHAS):
            ok = sim[rows, cols] >= alpha - EPS
            r, c = rows[ok], cols[ok]
            tp[a] += len(r)
            fn[a] += n_gt - len(r)
            fp[a] += n_pred - len(r)
            if len(r):
                matches[a, fd.gt_ids[r], fd.pred_ids[c]] += 1

    per_alpha = []
    for a, alpha in enumerate(HOTA_ALPHAS):
        m = matches[a]
        ass = m / np.maximum(1, gt_id_count + pred_id_count - m)
        per_alpha.append(_alpha_score(alpha, int(tp[a]), int(fn[a]), int(fp[a]), float((m * ass).sum())))
    return _hota_from_alphas(per_alpha)


def eval_hota(gt: Sequence[MotRow], pred: Sequence[MotRow]) -> HotaResult:
    """alpha 0.05〜0.95 の HOTA, DetA, AssA"""
    return _hota(_prepare(gt, pred))


# ---------------------------------------------------------------------------
# レポート
# ---------------------------------------------------------------------------

REPORT_KEYS = ("hota", "deta", "assa", "mota", "idf1", "tp", "fp", "fn", "idsw", "per_alpha")


@dataclass
class EvalReport:
    """1シーケンス（または集計）の評価結果"""
    hota: float
    deta: float
    assa: float
    mota: float
    idf1: float
    tp: int
    fp: int
    fn: int
    idsw: int
    per_alpha: List[AlphaScore] = field(default_factory=list)
    # 集計用
    num_gt: int = 0
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0

    def to_dict(self) -> Dict:
        """JSONレポート用の辞書（キーは REPORT_KEYS のみ）"""
        return {
            "hota": self.hota,
            "deta": self.deta,
            "assa": self.assa,
            "mota": self.mota,
            "idf1": self.idf1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "idsw": self.idsw,
            "per_alpha": [{"alpha": a.alpha, "hota": a.hota, "deta": a.deta, "assa": a.assa}
                          for a in self.per_alpha],
        }

    def summary_lines(self) -> List[str]:
        """key-value 形式のテキスト行"""
        return [
            f"hota: {self.hota:.6f}",
            f"deta: {self.deta:.6f}",
            f"assa: {self.assa:.6f}",
            f"mota: {self.mota:.6f}",
            f"idf1: {self.idf1:.6f}",
            f"tp: {self.tp}",
            f"fp: {self.fp}",
            f"fn: {self.fn}",
            f"idsw: {self.idsw}",
        ]


def evaluate(gt: Sequence[MotRow], pred: Sequence[MotRow], iou_threshold: float = 0.5) -> EvalReport:
    """1シーケンスのすべての指標を計算"""
    seq = _prepare(gt, pred)
    clear = _clear(seq, iou_threshold)
    identity = _identity(seq, iou_threshold)
    hota = _hota(seq)
    return EvalReport(hota=hota.hota, deta=hota.deta, assa=hota.assa, mota=clear.mota,
                      idf1=identity.idf1, tp=clear.tp, fp=clear.fp, fn=clear.fn, idsw=clear.idsw,
                      per_alpha=hota.per_alpha, num_gt=clear.num_gt, idtp=identity.idtp,
                      idfp=identity.idfp, idfn=identity.idfn)


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """複数シーケンスを集計（カウントは合計、AssA は TP で重み付け）"""
    if not reports:
        raise EvaluationError("集計するレポートがありません")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    idsw = sum(r.idsw for r in reports)
    num_gt = sum(r.num_gt for r in reports)
    idtp = sum(r.idtp for r in reports)
    idfp = sum(r.idfp for r in reports)
    idfn = sum(r.idfn for r in reports)

    per_alpha = []
    for a, alpha in enumerate(HOTA_ALPHAS):
        scores = [r.per_alpha[a] for r in reports]
        a_tp = sum(s.tp for s in scores)
        assa_sum = sum(s.assa * s.tp for s in scores)
        per_alpha.append(_alpha_score(alpha, a_tp, sum(s.fn for s in scores),
                                      sum(s.fp for s in scores), assa_sum))
    hota = _hota_from_alphas(per_alpha)
    return EvalReport(hota=hota.hota, deta=hota.deta, assa=hota.assa,
                      mota=(tp - fp - idsw) / max(1, num_gt),
                      idf1=2 * idtp / max(1, 2 * idtp + idfp + idfn),
                      tp=tp, fp=fp, fn=fn, idsw=idsw, per_alpha=per_alpha,
                      num_gt=num_gt, idtp=idtp, idfp=idfp, idfn=idfn)


# ---------------------------------------------------------------------------
# データセット統計量
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StatValue:
    mean: float
    std: float


@dataclass
class DatasetStats:
    """Obj, App, Den, Occ, Mot の平均と母標準偏差（App, Occ, Mot は%）"""
    obj: Optional[StatValue]
    app: Optional[StatValue]
    den: Optional[StatValue]
    occ: Optional[StatValue]
    mot: Optional[StatValue]

    def to_dict(self) -> Dict:
        return {k: (None if v is None else asdict(v)) for k, v in
                (("obj", self.obj), ("app", self.app), ("den", self.den),
                 ("occ", self.occ), ("mot", self.mot))}


def _stat(values: Sequence[float]) -> Optional[StatValue]:
    if len(values) == 0:
        return None
    arr = np.asarray(values, dtype=float)
    return StatValue(mean=float(arr.mean()), std=float(arr.std()))


def _pairwise_values(matrix: np.ndarray) -> np.ndarray:
    """対称行列の i < j 成分"""
    upper = np.triu_indices(matrix.shape[0], k=1)
    return matrix[upper]


def _density(boxes: np.ndarray, frame_size: Tuple[int, int]) -> int:
    """ヒートマップの最大値。ピクセル中心がボックス内にあるピクセルを数える"""
    width, height = frame_size
    heat = np.zeros((height, width), dtype=np.int32)
    for x, y, w, h in boxes:
        x0 = int(np.clip(np.ceil(x - 0.5), 0, width))
        x1 = int(np.clip(np.ceil(x + w - 0.5), 0, width))
        y0 = int(np.clip(np.ceil(y - 0.5), 0, height))
        y1 = int(np.clip(np.ceil(y + h - 0.5), 0, height))
        if x1 > x0 and y1 > y0:
            heat[y0:y1, x0:x1] += 1
    return int(heat.max())


def dataset_stats(gt: Sequence[MotRow], frame_size: Tuple[int, int],
                  embeddings: Optional[Mapping[Tuple[int, int], np.ndarray]] = None) -> DatasetStats:
    """正解トラックからデータセット特性の統計量を計算する

    embeddings は (frame, id) をキーにした単位ベクトル。ない場合 App は None。
    """
    width, height = frame_size
    if width <= 0 or height <= 0:
        raise ValueError(f"フレームサイズは正である必要があります: {frame_size}")
    if len(gt) == 0:
        return DatasetStats(None, None, None, None, None)

    by_frame: Dict[int, List[MotRow]] = {}
    for r in gt:
        by_frame.setdefault(r.frame, []).append(r)
    first, last = min(by_frame), max(by_frame)

    obj: List[int] = []
    den: List[int] = []
    occ: List[float] = []
    app: List[float] = []
    for t in range(first, last + 1):
        rows = by_frame.get(t, [])
        obj.append(len(rows))
        if not rows:
            den.append(0)
            continue
        boxes = np.array([r.xywh for r in rows], dtype=float)
        den.append(_density(boxes, frame_size))
        if len(rows) < 2:
            continue
        # Occ と App は全フレームの (i, j) 対をまとめた集合で平均・標準偏差をとる
        occ.extend(100.0 * _pairwise_values(iou_matrix(boxes, boxes)))
        if embeddings is not None:
            keys = [(t, r.id) for r in rows]
            if all(k in embeddings for k in keys):
                emb = np.stack([embeddings[k] for k in keys])
                emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
                app.extend(100.0 * _pairwise_values(emb @ emb.T))

    mot = []
    by_track: Dict[int, List[MotRow]] = {}
    for r in gt:
        by_track.setdefault(r.id, []).append(r)
    for rows in by_track.values():
        rows = sorted(rows, key=lambda r: r.frame)
        for prev, cur in zip(rows, rows[1:]):
            mot.append(100.0 * float(iou_matrix(np.array(prev.xywh), np.array(cur.xywh))[0, 0]))

    return DatasetStats(obj=_stat(obj), app=_stat(app) if embeddings is not None else None,
                        den=_stat(den), occ=_stat(occ), mot=_stat(mot))
