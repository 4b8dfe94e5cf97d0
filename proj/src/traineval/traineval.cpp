#include "gridloc/traineval/traineval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "gridloc/numkit/ops.hpp"
#include "gridloc/numkit/parallel.hpp"
#include "gridloc/numkit/rng.hpp"
#include "gridloc/numkit/sgd.hpp"

namespace gridloc::traineval {

using numkit::TapeT;
using numkit::Tensor;
using numkit::TensorT;
using i64 = std::int64_t;

// ---- configs & results ----------------------------------------------------------

void TrainConfig::validate() const {
    if (lr <= 0) throw ValidationError("lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ValidationError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ValidationError("weight_decay must be non-negative");
    if (epochs < 1) throw ValidationError("epochs must be at least 1");
    if (batch_size < 1) throw ValidationError("batch_size must be at least 1");
    if (positives_cap < 1) throw ValidationError("positives_cap must be at least 1");
    if (positive_iou <= 0 || positive_iou > 1) throw ValidationError("positive_iou must be in (0,1]");
    if (intermediate_weight < 0) throw ValidationError("intermediate_weight must be non-negative");
    for (int d : decay_epochs) {
        if (d < 1 || d >= epochs)
            throw ValidationError("decay epoch " + std::to_string(d) +
                                  " must lie in [1, epochs-1]");
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"decay_epochs", decay_epochs},
            {"batch_size", batch_size},
            {"positives_cap", positives_cap},
            {"positive_iou", positive_iou},
            {"intermediate_weight", intermediate_weight},
            {"hflip_augment", hflip_augment},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
    c.batch_size = j.at("batch_size").get<int>();
    c.positives_cap = j.at("positives_cap").get<int>();
    c.positive_iou = j.at("positive_iou").get<double>();
    c.intermediate_weight = j.at("intermediate_weight").get<double>();
    c.hflip_augment = j.at("hflip_augment").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

namespace {

int threshold_index(const std::vector<double>& thresholds, double t) {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (std::abs(thresholds[i] - t) < 1e-6) return static_cast<int>(i);
    }
    return -1;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string category_label(int category) {
    if (category >= 0 && category < scenes::kNumCategories)
        return scenes::category_name(static_cast<scenes::ShapeCategory>(category));
    return std::to_string(category);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

double EvalResult::ap_at(double threshold) const {
    const int i = threshold_index(thresholds, threshold);
    if (i < 0)
        throw ValidationError("no AP evaluated at threshold " + std::to_string(threshold));
    return ap[static_cast<std::size_t>(i)];
}

double EvalResult::category_mean(const std::string& name) const {
    auto it = per_category.find(name);
    if (it == per_category.end()) throw ValidationError("no category '" + name + "' in result");
    return mean_of(it->second);
}

nlohmann::json EvalResult::to_json() const {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [name, aps] : per_category) cats[name] = aps;
    return {{"thresholds", thresholds}, {"ap", ap}, {"mean_ap", mean_ap}, {"per_category", cats}};
}

EvalResult EvalResult::from_json(const nlohmann::json& j) {
    EvalResult r;
    r.thresholds = j.at("thresholds").get<std::vector<double>>();
    r.ap = j.at("ap").get<std::vector<double>>();
    r.mean_ap = j.at("mean_ap").get<double>();
    for (const auto& [name, aps] : j.at("per_category").items())
        r.per_category[name] = aps.get<std::vector<double>>();
    if (r.ap.size() != r.thresholds.size())
        throw ValidationError("eval result: ap and thresholds lengths differ");
    for (const auto& [name, aps] : r.per_category) {
        if (aps.size() != r.thresholds.size())
            throw ValidationError("eval result: category '" + name + "' length differs");
    }
    return r;
}

std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
    return t;
}

// ---- losses ---------------------------------------------------------------------

gridgeom::SupervisionMap downsample_supervision(const gridgeom::SupervisionMap& sup, int factor) {
    if (factor < 1) throw ValidationError("downsample factor must be at least 1");
    if (sup.maps.rank() != 3) throw ValidationError("supervision maps must be rank-3");
    const i64 j_count = sup.maps.dim(0);
    const i64 h = sup.maps.dim(1);
    const i64 w = sup.maps.dim(2);
    if (h % factor != 0 || w % factor != 0)
        throw ValidationError("supervision extent not divisible by downsample factor");
    const i64 ho = h / factor;
    const i64 wo = w / factor;
    gridgeom::SupervisionMap out;
    out.maps = Tensor::zeros({j_count, ho, wo});
    out.valid = sup.valid;
    for (i64 j = 0; j < j_count; ++j) {
        for (i64 y = 0; y < h; ++y) {
            for (i64 x = 0; x < w; ++x) {
                const float v = sup.maps[(j * h + y) * w + x];
                float& o = out.maps[(j * ho + y / factor) * wo + x / factor];
                o = std::max(o, v);
            }
        }
    }
    return out;
}

template <typename S>
i64 grid_loss(TapeT<S>& tape, const std::vector<i64>& final_logits,
              const std::vector<i64>& intermediate_logits,
              const std::vector<gridgeom::SupervisionMap>& supervision,
              double intermediate_weight, i64* all_invalid) {
    const std::size_t j_count = final_logits.size();
    if (j_count == 0) throw ValidationError("grid_loss: no grid points");
    if (intermediate_logits.size() != j_count)
        throw ValidationError("grid_loss: final and intermediate point counts differ");
    if (intermediate_weight < 0)
        throw ValidationError("grid_loss: intermediate_weight must be non-negative");
    const i64 rois = static_cast<i64>(supervision.size());
    if (rois == 0) throw ValidationError("grid_loss: no RoIs");

    const auto check = [&](i64 node, i64 hexp, i64 wexp) {
        const TensorT<S>& v = tape.value(node);
        if (v.rank() != 4 || v.dim(0) != rois || v.dim(1) != 1 ||
            (hexp > 0 && (v.dim(2) != hexp || v.dim(3) != wexp)))
            throw ValidationError("grid_loss: logits shape " + v.shape_str() +
                                  " inconsistent with " + std::to_string(rois) + " RoIs");
    };
    check(final_logits[0], 0, 0);
    check(intermediate_logits[0], 0, 0);
    const i64 hf = tape.value(final_logits[0]).dim(2);
    const i64 wf = tape.value(final_logits[0]).dim(3);
    const i64 hi = tape.value(intermediate_logits[0]).dim(2);
    const i64 wi = tape.value(intermediate_logits[0]).dim(3);
    for (std::size_t j = 1; j < j_count; ++j) {
        check(final_logits[j], hf, wf);
        check(intermediate_logits[j], hi, wi);
    }
    if (hi < 1 || wi < 1 || hf % hi != 0 || wf % wi != 0 || hf / hi != wf / wi)
        throw ValidationError("grid_loss: intermediate maps must evenly divide the final maps");
    const int factor = static_cast<int>(hf / hi);

    std::vector<double> roi_weight(static_cast<std::size_t>(rois), 0.0);
    for (i64 r = 0; r < rois; ++r) {
        const auto& sup = supervision[static_cast<std::size_t>(r)];
        if (sup.maps.rank() != 3 || sup.maps.dim(0) != static_cast<i64>(j_count) ||
            sup.maps.dim(1) != hf || sup.maps.dim(2) != wf ||
            sup.valid.size() != j_count)
            throw ValidationError("grid_loss: supervision shape mismatch");
        i64 n_valid = 0;
        for (std::uint8_t v : sup.valid) n_valid += v ? 1 : 0;
        if (n_valid == 0) {
            if (all_invalid) ++*all_invalid;
            continue;
        }
        roi_weight[static_cast<std::size_t>(r)] =
            1.0 / (static_cast<double>(rois) * static_cast<double>(n_valid));
    }

    std::vector<gridgeom::SupervisionMap> coarse;
    coarse.reserve(static_cast<std::size_t>(rois));
    for (const auto& sup : supervision) coarse.push_back(downsample_supervision(sup, factor));

    const double pixf = 1.0 / static_cast<double>(hf * wf);
    const double pixi = 1.0 / static_cast<double>(hi * wi);
    std::vector<i64> final_terms, inter_terms;
    for (std::size_t j = 0; j < j_count; ++j) {
        TensorT<S> tf = TensorT<S>::zeros({rois, 1, hf, wf});
        TensorT<S> wtf = TensorT<S>::zeros({rois, 1, hf, wf});
        TensorT<S> ti = TensorT<S>::zeros({rois, 1, hi, wi});
        TensorT<S> wti = TensorT<S>::zeros({rois, 1, hi, wi});
        for (i64 r = 0; r < rois; ++r) {
            const auto& sup = supervision[static_cast<std::size_t>(r)];
            const double w = roi_weight[static_cast<std::size_t>(r)];
            if (w == 0.0 || !sup.valid[j]) continue;
            const i64 pf = hf * wf;
            const i64 pi = wi * hi;
            for (i64 k = 0; k < pf; ++k) {
                tf[r * pf + k] = static_cast<S>(sup.maps[static_cast<i64>(j) * pf + k]);
                wtf[r * pf + k] = static_cast<S>(w * pixf);
            }
            const auto& csup = coarse[static_cast<std::size_t>(r)];
            for (i64 k = 0; k < pi; ++k) {
                ti[r * pi + k] = static_cast<S>(csup.maps[static_cast<i64>(j) * pi + k]);
                wti[r * pi + k] = static_cast<S>(w * pixi);
            }
        }
        final_terms.push_back(numkit::sigmoid_bce_weighted(tape, final_logits[j], tf, wtf));
        inter_terms.push_back(numkit::sigmoid_bce_weighted(tape, intermediate_logits[j], ti, wti));
    }
    const i64 lf = numkit::sum_scalars(tape, final_terms);
    const i64 li = numkit::sum_scalars(tape, inter_terms);
    return numkit::add(tape, lf, numkit::scale(tape, li, intermediate_weight));
}

template <typename S>
i64 regression_loss(TapeT<S>& tape, const std::vector<i64>& preds,
                    const std::vector<std::array<double, 4>>& targets) {
    const std::size_t rois = preds.size();
    if (rois == 0) throw ValidationError("regression_loss: no RoIs");
    if (targets.size() != rois)
        throw ValidationError("regression_loss: one target per prediction required");
    std::vector<i64> terms;
    terms.reserve(rois);
    for (std::size_t r = 0; r < rois; ++r) {
        const TensorT<S>& pv = tape.value(preds[r]);
        if (pv.numel() != 4)
            throw ValidationError("regression_loss: prediction must hold 4 offsets, got " +
                                  pv.shape_str());
        TensorT<S> tgt = TensorT<S>::zeros(pv.shape);
        for (int k = 0; k < 4; ++k) tgt[k] = static_cast<S>(targets[r][static_cast<std::size_t>(k)]);
        terms.push_back(numkit::smooth_l1(tape, preds[r], tgt));
    }
    return numkit::scale(tape, numkit::sum_scalars(tape, terms), 1.0 / static_cast<double>(rois));
}

std::array<double, 4> regression_targets(const gridgeom::RoiGeometry& roi,
                                         const gridgeom::BoxBounds& gt) {
    roi.validate();
    if (gt.width() <= 0 || gt.height() <= 0)
        throw ValidationError("regression_targets: degenerate ground-truth box");
    const double pcx = roi.p_x + roi.w_p / 2;
    const double pcy = roi.p_y + roi.h_p / 2;
    const double gcx = (gt.x_l + gt.x_r) / 2;
    const double gcy = (gt.y_u + gt.y_b) / 2;
    return {(gcx - pcx) / roi.w_p, (gcy - pcy) / roi.h_p, std::log(gt.width() / roi.w_p),
            std::log(gt.height() / roi.h_p)};
}

// ---- detection assembly & evaluation --------------------------------------------

std::vector<Detection> nms(const std::vector<Detection>& detections, double iou_threshold) {
    if (iou_threshold < 0 || iou_threshold > 1)
        throw ValidationError("nms: iou threshold must be in [0,1]");
    std::vector<int> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    for (const Detection& d : detections) {
        if (!(d.score >= 0.0 && d.score <= 1.0))
            throw ValidationError("nms: score outside [0,1]");
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return detections[static_cast<std::size_t>(a)].score >
               detections[static_cast<std::size_t>(b)].score;
    });
    std::vector<Detection> kept;
    for (int i : order) {
        const Detection& cand = detections[static_cast<std::size_t>(i)];
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.image_id == cand.image_id && gridgeom::iou(k.box, cand.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

namespace {

// AP per threshold over one (detections, ground truth) subset. Matching runs
// per image in parallel; the accumulation order is fixed by (score desc,
// subset order), so results do not depend on thread count.
std::vector<double> ap_for_subset(const std::vector<const Detection*>& dets,
                                  const std::vector<const GroundTruth*>& gts,
                                  const std::vector<double>& thresholds) {
    const std::size_t n_thr = thresholds.size();
    std::vector<double> ap(n_thr, 0.0);
    const i64 n_gt = static_cast<i64>(gts.size());
    if (n_gt == 0 || dets.empty()) return ap;

    std::map<int, std::pair<std::vector<int>, std::vector<int>>> by_image;
    for (std::size_t i = 0; i < dets.size(); ++i)
        by_image[dets[i]->image_id].first.push_back(static_cast<int>(i));
    for (std::size_t g = 0; g < gts.size(); ++g)
        by_image[gts[g]->image_id].second.push_back(static_cast<int>(g));
    std::vector<const std::pair<std::vector<int>, std::vector<int>>*> images;
    for (auto& [id, group] : by_image) images.push_back(&group);

    std::vector<std::vector<std::uint8_t>> tp(dets.size(),
                                              std::vector<std::uint8_t>(n_thr, 0));
    numkit::parallel_for(static_cast<i64>(images.size()), [&](i64 begin, i64 end) {
        for (i64 im = begin; im < end; ++im) {
            std::vector<int> det_idx = images[static_cast<std::size_t>(im)]->first;
            const std::vector<int>& gt_idx = images[static_cast<std::size_t>(im)]->second;
            std::stable_sort(det_idx.begin(), det_idx.end(), [&](int a, int b) {
                return dets[static_cast<std::size_t>(a)]->score >
                       dets[static_cast<std::size_t>(b)]->score;
            });
            for (std::size_t t = 0; t < n_thr; ++t) {
                std::vector<std::uint8_t> used(gt_idx.size(), 0);
                for (int di : det_idx) {
                    int best = -1;
                    double best_iou = 0.0;
                    for (std::size_t g = 0; g < gt_idx.size(); ++g) {
                        if (used[g]) continue;
                        const double v =
                            gridgeom::iou(dets[static_cast<std::size_t>(di)]->box,
                                          gts[static_cast<std::size_t>(gt_idx[g])]->box);
                        if (v >= thresholds[t] && v > best_iou) {
                            best_iou = v;
                            best = static_cast<int>(g);
                        }
                    }
                    if (best >= 0) {
                        used[static_cast<std::size_t>(best)] = 1;
                        tp[static_cast<std::size_t>(di)][t] = 1;
                    }
                }
            }
        }
    });

    std::vector<int> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dets[static_cast<std::size_t>(a)]->score >
               dets[static_cast<std::size_t>(b)]->score;
    });

    const std::size_t n = order.size();
    std::vector<double> prec(n), rec(n);
    for (std::size_t t = 0; t < n_thr; ++t) {
        i64 tp_count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            tp_count += tp[static_cast<std::size_t>(order[i])][t] ? 1 : 0;
            prec[i] = static_cast<double>(tp_count) / static_cast<double>(i + 1);
            rec[i] = static_cast<double>(tp_count) / static_cast<double>(n_gt);
        }
        for (std::size_t i = n - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
        double sum = 0.0;
        std::size_t i = 0;
        for (int k = 0; k <= 100; ++k) {
            const double r = static_cast<double>(k) / 100.0;
            while (i < n && rec[i] < r - 1e-12) ++i;
            if (i == n) break;
            sum += prec[i];
        }
        ap[t] = sum / 101.0;
    }
    return ap;
}

} // namespace

EvalResult evaluate_ap(const std::vector<Detection>& detections,
                       const std::vector<GroundTruth>& ground_truth,
                       const std::vector<double>& thresholds) {
    if (thresholds.empty()) throw ValidationError("evaluate_ap: no thresholds");
    for (double t : thresholds) {
        if (t <= 0 || t > 1) throw ValidationError("evaluate_ap: thresholds must be in (0,1]");
    }
    for (const Detection& d : detections) {
        if (!(d.score >= 0.0 && d.score <= 1.0))
            throw ValidationError("evaluate_ap: score outside [0,1]");
    }
    EvalResult res;
    res.thresholds = thresholds;

    std::vector<const Detection*> all_dets;
    all_dets.reserve(detections.size());
    for (const Detection& d : detections) all_dets.push_back(&d);
    std::vector<const GroundTruth*> all_gts;
    all_gts.reserve(ground_truth.size());
    for (const GroundTruth& g : ground_truth) all_gts.push_back(&g);
    res.ap = ap_for_subset(all_dets, all_gts, thresholds);
    res.mean_ap = mean_of(res.ap);

    std::set<int> categories;
    for (const GroundTruth& g : ground_truth) categories.insert(g.category);
    for (int c : categories) {
        std::vector<const Detection*> cd;
        for (const Detection& d : detections)
            if (d.category == c) cd.push_back(&d);
        std::vector<const GroundTruth*> cg;
        for (const GroundTruth& g : ground_truth)
            if (g.category == c) cg.push_back(&g);
        res.per_category[category_label(c)] = ap_for_subset(cd, cg, thresholds);
    }
    return res;
}

// ---- training -------------------------------------------------------------------

namespace {

void shuffle_indices(std::vector<int>& idx, numkit::CounterRng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(static_cast<i64>(i)));
        std::swap(idx[i - 1], idx[j]);
    }
}

// Positive proposal indices, randomly capped. The partial shuffle draws from
// rng only when the cap binds, keeping the stream layout stable.
std::vector<int> pick_positives(const scenes::SceneSample& s, const TrainConfig& cfg,
                                numkit::CounterRng& rng) {
    std::vector<int> pos;
    for (std::size_t p = 0; p < s.proposals.size(); ++p)
        if (s.proposals[p].iou >= cfg.positive_iou) pos.push_back(static_cast<int>(p));
    if (static_cast<int>(pos.size()) > cfg.positives_cap) {
        for (int i = 0; i < cfg.positives_cap; ++i) {
            const i64 j = static_cast<i64>(i) +
                          rng.next_below(static_cast<i64>(pos.size()) - static_cast<i64>(i));
            std::swap(pos[static_cast<std::size_t>(i)], pos[static_cast<std::size_t>(j)]);
        }
        pos.resize(static_cast<std::size_t>(cfg.positives_cap));
    }
    return pos;
}

gridgeom::RoiGeometry roi_of(const gridgeom::BoxBounds& box, const gridnet::ModelConfig& cfg) {
    gridgeom::RoiGeometry roi;
    roi.p_x = box.x_l;
    roi.p_y = box.y_u;
    roi.w_p = box.width();
    roi.h_p = box.height();
    roi.w_o = cfg.heatmap_size;
    roi.h_o = cfg.heatmap_size;
    return roi;
}

i64 image_leaf(TapeT<float>& tape, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1)
        throw ValidationError("scene image must be (1,H,W)");
    Tensor batched({1, 1, image.dim(1), image.dim(2)}, image.data);
    return tape.leaf(std::move(batched), "image");
}

} // namespace

TrainResult train(gridnet::Model& model, const std::vector<scenes::SceneSample>& dataset,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw ValidationError("train: empty dataset");
    const bool grid = model.head == gridnet::Head::grid;
    const int out_size = grid ? model.cfg.roi_size_grid : model.cfg.roi_size_reg;
    auto params = model.store.all();
    numkit::SgdState sgd;
    sgd.momentum = cfg.momentum;
    sgd.weight_decay = cfg.weight_decay;
    numkit::CounterRng order_rng(numkit::derive_seed(cfg.seed, "train:order"));
    numkit::CounterRng flip_rng(numkit::derive_seed(cfg.seed, "train:flip"));
    numkit::CounterRng pick_rng(numkit::derive_seed(cfg.seed, "train:positives"));

    TrainResult result;
    i64 total_steps = 0;
    std::vector<int> perm(dataset.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        for (int d : cfg.decay_epochs)
            if (epoch >= d) lr *= 0.1;
        sgd.lr = lr;
        shuffle_indices(perm, order_rng);
        double loss_sum = 0.0;
        i64 steps = 0;
        for (std::size_t start = 0; start < perm.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(perm.size(), start + static_cast<std::size_t>(cfg.batch_size));
            TapeT<float> tape;
            std::vector<i64> roi_feats, reg_preds;
            std::vector<gridgeom::SupervisionMap> supervision;
            std::vector<std::array<double, 4>> reg_targets;
            for (std::size_t b = start; b < stop; ++b) {
                const scenes::SceneSample* s = &dataset[static_cast<std::size_t>(perm[b])];
                scenes::SceneSample flipped;
                if (cfg.hflip_augment && flip_rng.next_uniform() < 0.5) {
                    flipped = scenes::hflip(*s);
                    s = &flipped;
                }
                const std::vector<int> pos = pick_positives(*s, cfg, pick_rng);
                if (pos.empty()) continue;
                i64 fmap = gridnet::backbone_forward(tape, model, image_leaf(tape, s->image));
                const TensorT<float>& fv = tape.value(fmap);
                fmap = numkit::reshape(tape, fmap, {fv.dim(1), fv.dim(2), fv.dim(3)});
                for (int p : pos) {
                    const scenes::Proposal& prop = s->proposals[static_cast<std::size_t>(p)];
                    const gridgeom::RoiGeometry roi = roi_of(prop.box, model.cfg);
                    const i64 feat = gridnet::roi_extract(tape, fmap, roi, out_size);
                    const gridgeom::BoxBounds& gt =
                        s->objects[static_cast<std::size_t>(prop.object_index)].box;
                    if (grid) {
                        roi_feats.push_back(feat);
                        supervision.push_back(gridgeom::render_supervision(
                            gridgeom::grid_point_targets(gt, model.spec), roi, model.spec,
                            model.cfg.extended_mapping));
                    } else {
                        reg_preds.push_back(gridnet::regression_forward(tape, model, feat));
                        reg_targets.push_back(regression_targets(roi, gt));
                    }
                }
            }
            if (roi_feats.empty() && reg_preds.empty()) continue;
            i64 loss;
            if (grid) {
                const i64 stacked = numkit::stack_rank3(tape, roi_feats);
                gridnet::GridHeadOut out = gridnet::grid_head_forward(tape, model, stacked);
                loss = grid_loss(tape, out.final_logits, out.intermediate, supervision,
                                 cfg.intermediate_weight, &result.all_invalid_rois);
            } else {
                loss = regression_loss(tape, reg_preds, reg_targets);
            }
            const double lv = static_cast<double>(tape.value(loss)[0]);
            if (!std::isfinite(lv))
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
            tape.backward(loss);
            numkit::sgd_step(params, sgd);
            loss_sum += lv;
            ++steps;
        }
        result.epoch_loss.push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
        result.epoch_lr.push_back(lr);
        total_steps += steps;
    }
    if (total_steps == 0) throw ValidationError("train: dataset contains no positive proposals");
    return result;
}

std::string loss_curve_csv(const TrainResult& result) {
    std::string out = "epoch,loss,lr\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", e + 1, result.epoch_loss[e],
                      result.epoch_lr[e]);
        out += buf;
    }
    return out;
}

// ---- inference ------------------------------------------------------------------

namespace {

gridgeom::BoxBounds clip_to_image(gridgeom::BoxBounds b, double w, double h) {
    b.x_l = std::clamp(b.x_l, 0.0, w);
    b.x_r = std::clamp(b.x_r, 0.0, w);
    b.y_u = std::clamp(b.y_u, 0.0, h);
    b.y_b = std::clamp(b.y_b, 0.0, h);
    return b;
}

} // namespace

std::vector<Detection> infer(gridnet::Model& model, const scenes::SceneSample& sample,
                             int image_id, int top_k, double nms_iou) {
    if (top_k < 1) throw ValidationError("infer: top_k must be at least 1");
    if (sample.proposals.empty()) return {};
    std::vector<int> order(sample.proposals.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return sample.proposals[static_cast<std::size_t>(a)].iou >
               sample.proposals[static_cast<std::size_t>(b)].iou;
    });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(top_k)));

    const bool grid = model.head == gridnet::Head::grid;
    const int out_size = grid ? model.cfg.roi_size_grid : model.cfg.roi_size_reg;
    const double img_w = static_cast<double>(sample.image.dim(2));
    const double img_h = static_cast<double>(sample.image.dim(1));

    TapeT<float> tape;
    i64 fmap = gridnet::backbone_forward(tape, model, image_leaf(tape, sample.image));
    const TensorT<float>& fv = tape.value(fmap);
    fmap = numkit::reshape(tape, fmap, {fv.dim(1), fv.dim(2), fv.dim(3)});

    std::vector<gridgeom::RoiGeometry> rois;
    std::vector<i64> feats;
    for (int p : order) {
        const gridgeom::RoiGeometry roi =
            roi_of(sample.proposals[static_cast<std::size_t>(p)].box, model.cfg);
        rois.push_back(roi);
        feats.push_back(gridnet::roi_extract(tape, fmap, roi, out_size));
    }

    std::vector<Detection> dets;
    if (grid) {
        const i64 stacked = numkit::stack_rank3(tape, feats);
        gridnet::GridHeadOut out = gridnet::grid_head_forward(tape, model, stacked);
        const int j_count = model.spec.count();
        const i64 hm = model.cfg.heatmap_size;
        const i64 pix = hm * hm;
        for (std::size_t r = 0; r < order.size(); ++r) {
            std::vector<gridgeom::GridPointEstimate> est;
            double score = 0.0;
            for (int j = 0; j < j_count; ++j) {
                const TensorT<float>& logits = tape.value(out.final_logits[static_cast<std::size_t>(j)]);
                Tensor heat = Tensor::zeros({hm, hm});
                for (i64 k = 0; k < pix; ++k)
                    heat[k] = logits[static_cast<i64>(r) * pix + k];
                heat = numkit::sigmoid(heat);
                est.push_back(gridgeom::decode_heatmap(heat, rois[r],
                                                       model.cfg.extended_mapping, j));
                score += est.back().p;
            }
            score /= static_cast<double>(j_count);
            const gridgeom::BoxBounds box = clip_to_image(
                gridgeom::boxes_from_grid_points(est, model.spec), img_w, img_h);
            const scenes::Proposal& prop =
                sample.proposals[static_cast<std::size_t>(order[r])];
            dets.push_back({box, score, image_id,
                            static_cast<int>(sample.objects[static_cast<std::size_t>(
                                                                prop.object_index)]
                                                 .category)});
        }
    } else {
        for (std::size_t r = 0; r < order.size(); ++r) {
            const i64 off = gridnet::regression_forward(tape, model, feats[r]);
            const TensorT<float>& ov = tape.value(off);
            const std::array<double, 4> offsets = {
                static_cast<double>(ov[0]), static_cast<double>(ov[1]),
                static_cast<double>(ov[2]), static_cast<double>(ov[3])};
            const gridgeom::BoxBounds box =
                clip_to_image(gridnet::decode_regression(offsets, rois[r]), img_w, img_h);
            const double norm = std::sqrt(offsets[0] * offsets[0] + offsets[1] * offsets[1] +
                                          offsets[2] * offsets[2] + offsets[3] * offsets[3]);
            const double score = std::max(0.0, 1.0 - norm);
            const scenes::Proposal& prop =
                sample.proposals[static_cast<std::size_t>(order[r])];
            dets.push_back({box, score, image_id,
                            static_cast<int>(sample.objects[static_cast<std::size_t>(
                                                                prop.object_index)]
                                                 .category)});
        }
    }
    return nms(dets, nms_iou);
}

DatasetEval run_inference(gridnet::Model& model, const std::vector<scenes::SceneSample>& dataset,
                          int top_k, double nms_iou) {
    DatasetEval out;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const int image_id = static_cast<int>(i);
        std::vector<Detection> dets = infer(model, dataset[i], image_id, top_k, nms_iou);
        out.detections.insert(out.detections.end(), dets.begin(), dets.end());
        for (const scenes::SceneObject& obj : dataset[i].objects)
            out.ground_truth.push_back({obj.box, image_id, static_cast<int>(obj.category)});
    }
    return out;
}

// ---- reports --------------------------------------------------------------------

AblationReport ablation_report(const std::vector<EvalResult>& runs,
                               const std::vector<std::string>& labels) {
    if (runs.size() < 2) throw ValidationError("ablation report needs at least two runs");
    if (labels.size() != runs.size())
        throw ValidationError("ablation report needs one label per run");
    const EvalResult& base = runs[0];
    for (const EvalResult& r : runs) {
        if (r.thresholds.size() != base.thresholds.size())
            throw ValidationError("ablation report: runs use different thresholds");
        for (std::size_t t = 0; t < base.thresholds.size(); ++t) {
            if (std::abs(r.thresholds[t] - base.thresholds[t]) > 1e-9)
                throw ValidationError("ablation report: runs use different thresholds");
        }
        if (r.per_category.size() != base.per_category.size())
            throw ValidationError("ablation report: category sets differ between runs");
        for (const auto& [name, aps] : base.per_category) {
            if (r.per_category.find(name) == r.per_category.end())
                throw ValidationError("ablation report: category sets differ between runs");
        }
    }

    const std::array<double, 4> named_thresholds = {0.5, 0.75, 0.8, 0.9};
    std::vector<int> named_idx;
    for (double t : named_thresholds) {
        const int i = threshold_index(base.thresholds, t);
        if (i >= 0) named_idx.push_back(i);
    }

    AblationReport rep;
    rep.json["labels"] = labels;
    rep.json["thresholds"] = base.thresholds;
    rep.json["runs"] = nlohmann::json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        nlohmann::json jr = runs[i].to_json();
        jr["label"] = labels[i];
        rep.json["runs"].push_back(jr);
    }

    std::string csv = "row,AP";
    for (int i : named_idx)
        csv += ",AP@" + fmt(base.thresholds[static_cast<std::size_t>(i)]).substr(0, 4);
    for (const auto& [name, aps] : base.per_category) csv += "," + name;
    csv += "\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
        csv += labels[i] + "," + fmt(runs[i].mean_ap);
        for (int t : named_idx) csv += "," + fmt(runs[i].ap[static_cast<std::size_t>(t)]);
        for (const auto& [name, aps] : runs[i].per_category) csv += "," + fmt(mean_of(aps));
        csv += "\n";
    }

    rep.json["deltas"] = nlohmann::json::array();
    for (std::size_t i = 1; i < runs.size(); ++i) {
        nlohmann::json dj;
        dj["label"] = labels[i];
        dj["baseline"] = labels[0];
        std::vector<double> dap(base.thresholds.size());
        for (std::size_t t = 0; t < dap.size(); ++t) dap[t] = runs[i].ap[t] - base.ap[t];
        dj["ap_delta"] = dap;
        dj["mean_ap_delta"] = runs[i].mean_ap - base.mean_ap;

        csv += "delta " + labels[i] + "," + fmt(runs[i].mean_ap - base.mean_ap);
        for (int t : named_idx) csv += "," + fmt(dap[static_cast<std::size_t>(t)]);

        std::vector<std::pair<std::string, double>> gains; // (category, mean gain)
        nlohmann::json cj = nlohmann::json::object();
        for (const auto& [name, aps] : base.per_category) {
            const std::vector<double>& ours = runs[i].per_category.at(name);
            std::vector<double> gain(aps.size());
            for (std::size_t t = 0; t < aps.size(); ++t) gain[t] = ours[t] - aps[t];
            const double mg = mean_of(gain);
            cj[name] = {{"gain", gain}, {"mean_gain", mg}};
            gains.emplace_back(name, mg);
            csv += "," + fmt(mg);
        }
        csv += "\n";
        std::stable_sort(gains.begin(), gains.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        nlohmann::json ranking = nlohmann::json::array();
        for (const auto& [name, g] : gains) ranking.push_back(name);
        dj["per_category"] = cj;
        dj["category_ranking"] = ranking;
        rep.json["deltas"].push_back(dj);
    }

    const int i08 = threshold_index(base.thresholds, 0.8);
    for (std::size_t i = 1; i < runs.size(); ++i) {
        csv += "\ncategory gains," + labels[i] + " vs " + labels[0] + "\n";
        csv += i08 >= 0 ? "category,mean_gain,gain@0.80\n" : "category,mean_gain\n";
        std::vector<std::pair<std::string, double>> gains;
        for (const auto& [name, aps] : base.per_category)
            gains.emplace_back(name, runs[i].category_mean(name) - mean_of(aps));
        std::stable_sort(gains.begin(), gains.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        for (const auto& [name, g] : gains) {
            csv += name + "," + fmt(g);
            if (i08 >= 0) {
                const double g08 = runs[i].per_category.at(name)[static_cast<std::size_t>(i08)] -
                                   base.per_category.at(name)[static_cast<std::size_t>(i08)];
                csv += "," + fmt(g08);
            }
            csv += "\n";
        }
    }
    rep.csv = csv;
    return rep;
}

// ---- explicit instantiations ----------------------------------------------------

#define GRIDLOC_TRAINEVAL_INSTANTIATE(S)                                                        \
    template i64 grid_loss<S>(TapeT<S>&, const std::vector<i64>&, const std::vector<i64>&,      \
                              const std::vector<gridgeom::SupervisionMap>&, double, i64*);      \
    template i64 regression_loss<S>(TapeT<S>&, const std::vector<i64>&,                         \
                                    const std::vector<std::array<double, 4>>&);

GRIDLOC_TRAINEVAL_INSTANTIATE(float)
GRIDLOC_TRAINEVAL_INSTANTIATE(double)

#undef GRIDLOC_TRAINEVAL_INSTANTIATE

} // namespace gridloc::traineval
