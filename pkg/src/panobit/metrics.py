"""Segmentation metrics: panoptic quality with IoU>0.5 matching, DAVIS-style
region Jaccard / boundary F for videos, and instance-ID track consistency.

Segments are (class_id, instance_id) pixel sets; the null class forms no
segment on either side. A brute-force all-pairs matcher is provided as the
test oracle for the fast intersection-counting path.
"""

import csv
import math

import numpy as np
from scipy import ndimage


class SegmentMatch:
    """IoU>0.5 same-class pairs plus the unmatched segment keys per side."""

    def __init__(self, pairs, unmatched_gt, unmatched_pred):
        self.pairs = pairs  # list of (gt_key, pred_key, iou); key = (class, instance)
        self.unmatched_gt = unmatched_gt
        self.unmatched_pred = unmatched_pred


def _segment_keys(mask):
    """Flat uint64 segment key per pixel; null-class pixels get key 0."""
    keys = mask.class_ids.astype(np.uint64) * np.uint64(1 << 16) + mask.instance_ids
    keys[mask.class_ids == 0] = 0
    return keys


def _key_to_pair(key):
    return (int(key) >> 16, int(key) & 0xFFFF)


def match_segments(pred, gt):
    """Match same-class segments with IoU > 0.5 (each pairing is unique)."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    gk = _segment_keys(gt).ravel()
    pk = _segment_keys(pred).ravel()
    gt_ids, gt_areas = np.unique(gk, return_counts=True)
    pred_ids, pred_areas = np.unique(pk, return_counts=True)
    gt_area = dict(zip(gt_ids.tolist(), gt_areas.tolist()))
    pred_area = dict(zip(pred_ids.tolist(), pred_areas.tolist()))
    gt_area.pop(0, None)
    pred_area.pop(0, None)

    inter_ids, inter_areas = np.unique(gk * np.uint64(1 << 32) + pk, return_counts=True)
    pairs = []
    matched_gt, matched_pred = set(), set()
    for combo, inter in zip(inter_ids.tolist(), inter_areas.tolist()):
        g = combo >> 32
        p = combo & 0xFFFFFFFF
        if g == 0 or p == 0:
            continue
        if (g >> 16) != (p >> 16):  # class mismatch
            continue
        union = gt_area[g] + pred_area[p] - inter
        iou = inter / union
        if iou > 0.5:
            pairs.append((_key_to_pair(g), _key_to_pair(p), iou))
            matched_gt.add(g)
            matched_pred.add(p)
    unmatched_gt = [_key_to_pair(k) for k in gt_area if k not in matched_gt]
    unmatched_pred = [_key_to_pair(k) for k in pred_area if k not in matched_pred]
    return SegmentMatch(pairs, unmatched_gt, unmatched_pred)


def match_segments_bruteforce(pred, gt):
    """All-pairs IoU oracle; asserts the IoU>0.5 matching is unique."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {gt.shape}")

    def segments(mask):
        out = {}
        for cid in np.unique(mask.class_ids):
            if cid == 0:
                continue
            sel = mask.class_ids == cid
            for iid in np.unique(mask.instance_ids[sel]):
                out[(int(cid), int(iid))] = sel & (mask.instance_ids == iid)
        return out

    gt_segs = segments(gt)
    pred_segs = segments(pred)
    pairs = []
    for gkey, gpix in gt_segs.items():
        for pkey, ppix in pred_segs.items():
            if gkey[0] != pkey[0]:
                continue
            inter = np.count_nonzero(gpix & ppix)
            if inter == 0:
                continue
            union = np.count_nonzero(gpix | ppix)
            iou = inter / union
            if iou > 0.5:
                pairs.append((gkey, pkey, iou))
    for side in (0, 1):
        seen = [p[side] for p in pairs]
        assert len(seen) == len(set(seen)), "IoU>0.5 matching must be unique"
    matched_gt = {p[0] for p in pairs}
    matched_pred = {p[1] for p in pairs}
    return SegmentMatch(
        pairs,
        [k for k in gt_segs if k not in matched_gt],
        [k for k in pred_segs if k not in matched_pred],
    )


class PQStats:
    """Per-class TP/FP/FN counts and summed matched IoU."""

    def __init__(self):
        self.tp = {}
        self.fp = {}
        self.fn = {}
        self.iou_sum = {}

    def _bump(self, counter, cid, amount=1):
        counter[cid] = counter.get(cid, 0) + amount

    def accumulate(self, match):
        for (gcid, _), _, iou in match.pairs:
            self._bump(self.tp, gcid)
            self._bump(self.iou_sum, gcid, iou)
        for cid, _ in match.unmatched_gt:
            self._bump(self.fn, cid)
        for cid, _ in match.unmatched_pred:
            self._bump(self.fp, cid)

    def classes(self):
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    def per_class_pq(self):
        out = {}
        for cid in self.classes():
            denom = self.tp.get(cid, 0) + 0.5 * self.fp.get(cid, 0) + 0.5 * self.fn.get(cid, 0)
            out[cid] = self.iou_sum.get(cid, 0.0) / denom if denom > 0 else 0.0
        return out


def panoptic_quality(mask_pairs, thing_classes):
    """Aggregate PQ over (pred, gt) pairs; averages per-class PQ over classes
    that appear in gt or pred. Returns PQ, PQ_thing, PQ_stuff and the stats."""
    stats = PQStats()
    count = 0
    for pred, gt in mask_pairs:
        stats.accumulate(match_segments(pred, gt))
        count += 1
    if count == 0:
        raise ValueError("panoptic_quality needs at least one mask pair")
    per_class = stats.per_class_pq()
    thing_classes = set(thing_classes)

    def avg(cids):
        vals = [per_class[c] for c in cids]
        return float(np.mean(vals)) if vals else 0.0

    all_cids = list(per_class)
    return {
        "pq": avg(all_cids),
        "pq_thing": avg([c for c in all_cids if c in thing_classes]),
        "pq_stuff": avg([c for c in all_cids if c not in thing_classes]),
        "per_class": per_class,
        "stats": stats,
    }


def _binary_iou(a, b):
    if not a.any() and not b.any():
        return 1.0
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def _object_tracks(masks):
    """gt instance id -> per-frame boolean masks (all frames, maybe empty)."""
    ids = set()
    for m in masks:
        ids.update(np.unique(m.instance_ids[m.instance_ids > 0]).tolist())
    return {
        int(i): [m.instance_ids == i for m in masks] for i in sorted(ids)
    }


def _best_track(gt_track, pred_masks):
    """Pred instance id with the highest mean IoU against a gt object track."""
    candidates = set()
    for m in pred_masks:
        candidates.update(np.unique(m.instance_ids[m.instance_ids > 0]).tolist())
    best_id, best_score = None, -1.0
    for pid in sorted(candidates):
        score = float(
            np.mean([_binary_iou(g, m.instance_ids == pid) for g, m in zip(gt_track, pred_masks)])
        )
        if score > best_score:
            best_id, best_score = pid, score
    return best_id


def jaccard_mean(pred_masks, gt_masks):
    """Region similarity for one video: per-object mean IoU against the
    best-matching predicted track. Returns (J-Mean, J-Recall, per-object)."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("frame counts differ")
    per_object = []
    for _, track in _object_tracks(gt_masks).items():
        pid = _best_track(track, pred_masks)
        if pid is None:
            per_object.append(0.0)
            continue
        ious = [_binary_iou(g, m.instance_ids == pid) for g, m in zip(track, pred_masks)]
        per_object.append(float(np.mean(ious)))
    if not per_object:
        return 1.0, 1.0, []
    j_mean = float(np.mean(per_object))
    j_recall = float(np.mean([j > 0.5 for j in per_object]))
    return j_mean, j_recall, per_object


def _boundary(mask):
    """Boundary pixels of a binary mask, 4-connectivity; image border counts
    as outside so edge pixels of the mask are boundary."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    padded = np.pad(mask, 1, mode="constant")
    inner = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~inner


def _disk(radius):
    r = int(radius)
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def boundary_f(pred, gt, tolerance=None):
    """Boundary F-measure between two binary masks with pixel tolerance r.

    Default r follows the DAVIS convention: ceil(0.008 * image diagonal).
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    if tolerance is None:
        tolerance = math.ceil(0.008 * math.hypot(*pred.shape))
    pb = _boundary(pred)
    gb = _boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    disk = _disk(tolerance)
    gb_dil = ndimage.binary_dilation(gb, structure=disk)
    pb_dil = ndimage.binary_dilation(pb, structure=disk)
    precision = np.count_nonzero(pb & gb_dil) / np.count_nonzero(pb)
    recall = np.count_nonzero(gb & pb_dil) / np.count_nonzero(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def video_jf(pred_masks, gt_masks, tolerance=None):
    """J&F summary for one video, per-object averaged over frames."""
    j_mean, j_recall, per_obj_j = jaccard_mean(pred_masks, gt_masks)
    f_scores = []
    for _, track in _object_tracks(gt_masks).items():
        pid = _best_track(track, pred_masks)
        if pid is None:
            f_scores.append(0.0)
            continue
        per_frame = [
            boundary_f(m.instance_ids == pid, g, tolerance)
            for g, m in zip(track, pred_masks)
        ]
        f_scores.append(float(np.mean(per_frame)))
    f_mean = float(np.mean(f_scores)) if f_scores else 1.0
    f_recall = float(np.mean([f > 0.5 for f in f_scores])) if f_scores else 1.0
    return {
        "jf": (j_mean + f_mean) / 2.0,
        "j_mean": j_mean,
        "j_recall": j_recall,
        "f_mean": f_mean,
        "f_recall": f_recall,
        "per_object_j": per_obj_j,
    }


def track_consistency(pred_masks, gt_masks):
    """Fraction of adjacent-frame transitions where a gt object keeps the
    same best-IoU predicted instance id. No transitions -> 1.0."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("frame counts differ")
    stable = 0
    total = 0
    for _, track in _object_tracks(gt_masks).items():
        mapped = []
        for g, m in zip(track, pred_masks):
            if not g.any():
                mapped.append(None)  # object not visible this frame
                continue
            ids = np.unique(m.instance_ids[g & (m.instance_ids > 0)])
            if len(ids) == 0:
                mapped.append(-1)  # visible but nothing predicted on it
                continue
            best, best_iou = -1, -1.0
            for pid in ids.tolist():
                iou = _binary_iou(g, m.instance_ids == pid)
                if iou > best_iou:
                    best, best_iou = pid, iou
            mapped.append(best)
        for a, b in zip(mapped, mapped[1:]):
            if a is None or b is None:
                continue  # transition involves an invisible frame
            total += 1
            if a == b and a != -1:
                stable += 1
    return stable / total if total else 1.0


# -- reporting ---------------------------------------------------------------

def format_pq_table(rows, headers=("method", "PQ", "PQ_thing", "PQ_stuff")):
    """Plain-text table in the PQ / PQ^thing / PQ^stuff column layout."""
    table = [headers] + [
        [str(r[0])] + [f"{v:.4f}" if isinstance(v, float) else str(v) for v in r[1:]]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines)


def format_jf_table(rows):
    return format_pq_table(
        rows, headers=("method", "J&F", "J-Mean", "J-Recall", "F-Mean", "F-Recall")
    )


def write_csv_report(path, headers, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        writer.writerows(rows)
