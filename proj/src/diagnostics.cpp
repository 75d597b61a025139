// SPDX-License-Identifier: Apache-2.0
#include "fixnet/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace fixnet {

namespace {

double flat_dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

Parameters perturbed(const Parameters& params, const GradientSet& dir, double eta) {
    Parameters p = params;
    for (size_t l = 0; l < p.layers.size(); ++l) {
        for (size_t i = 0; i < p.layers[l].weight.data.size(); ++i)
            p.layers[l].weight.data[i] += eta * dir.dweight[l].data[i];
        for (size_t i = 0; i < p.layers[l].bias.data.size(); ++i)
            p.layers[l].bias.data[i] += eta * dir.dbias[l].data[i];
    }
    return p;
}

double grad_l2(const GradientSet& g) {
    double s = 0.0;
    for (size_t l = 0; l < g.dweight.size(); ++l) {
        s += flat_dot(g.dweight[l], g.dweight[l]);
        s += flat_dot(g.dbias[l], g.dbias[l]);
    }
    return std::sqrt(s);
}

}  // namespace

MismatchReport mismatch_per_layer(const NetworkSpec& net, const Parameters& params,
                                  const PrecisionAssignment& assign,
                                  const std::vector<Tensor>& batches,
                                  const std::vector<std::vector<int>>& labels) {
    if (batches.empty() || batches.size() != labels.size())
        throw std::invalid_argument("mismatch_per_layer: need matching batches and labels");
    const int L = net.num_layers();
    std::vector<double> cos_sum(size_t(L), 0.0), rel_sum(size_t(L), 0.0);
    std::vector<int> defined(size_t(L), 0);

    PrecisionAssignment a = assign;
    calibrate_activations(a, net, params, batches[0]);

    for (size_t b = 0; b < batches.size(); ++b) {
        const Trace tq = forward_quantized(net, params, a, batches[b], labels[b]);
        const Trace tf = forward_float(net, params, batches[b], labels[b]);
        const GradientSet gq = backward_presumed(net, tq, labels[b]);
        const GradientSet gf = backward_presumed(net, tf, labels[b]);
        for (int l = 0; l < L; ++l) {
            const Tensor& q = gq.dweight[size_t(l)];
            const Tensor& f = gf.dweight[size_t(l)];
            const double nq = std::sqrt(flat_dot(q, q));
            const double nf = std::sqrt(flat_dot(f, f));
            if (nq == 0.0 || nf == 0.0) continue;  // flagged, not averaged
            double diff = 0.0;
            for (size_t i = 0; i < q.data.size(); ++i) {
                const double d = q.data[i] - f.data[i];
                diff += d * d;
            }
            cos_sum[size_t(l)] += flat_dot(q, f) / (nq * nf);
            rel_sum[size_t(l)] += std::sqrt(diff) / nf;
            ++defined[size_t(l)];
        }
    }

    MismatchReport rep;
    rep.batches = int(batches.size());
    rep.weight_precision = a.weights.empty() ? "" : a.weights[0].prec.to_string();
    rep.act_precision = a.acts.empty() ? "" : a.acts[0].prec.to_string();
    for (int l = 0; l < L; ++l) {
        MismatchReport::LayerStat st;
        st.layer = l + 1;
        st.defined_batches = defined[size_t(l)];
        if (defined[size_t(l)] == 0) {
            st.flag = "undefined";
        } else {
            st.flag = "ok";
            st.cosine_mean = cos_sum[size_t(l)] / defined[size_t(l)];
            st.rel_err_mean = rel_sum[size_t(l)] / defined[size_t(l)];
        }
        rep.layers.push_back(st);
    }
    return rep;
}

std::string MismatchReport::to_csv() const {
    std::string out = "layer,cosine_mean,rel_err_mean,flag\n";
    char buf[128];
    for (const auto& st : layers) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%s\n", st.layer, st.cosine_mean,
                      st.rel_err_mean, st.flag.c_str());
        out += buf;
    }
    return out;
}

std::string MismatchReport::to_json() const {
    nlohmann::json j;
    j["batches"] = batches;
    j["weight_precision"] = weight_precision;
    j["act_precision"] = act_precision;
    j["layers"] = nlohmann::json::array();
    for (const auto& st : layers)
        j["layers"].push_back({{"layer", st.layer},
                               {"cosine_mean", st.cosine_mean},
                               {"rel_err_mean", st.rel_err_mean},
                               {"defined_batches", st.defined_batches},
                               {"flag", st.flag}});
    return j.dump(2) + "\n";
}

DescentReport descent_check(const NetworkSpec& net, const Parameters& params,
                            const PrecisionAssignment& assign, const Tensor& batch,
                            std::span<const int> labels, double step_scale) {
    if (!(step_scale > 0.0))
        throw std::invalid_argument("descent_check: step_scale must be > 0");
    PrecisionAssignment a = assign;
    calibrate_activations(a, net, params, batch);

    const Trace tq = forward_quantized(net, params, a, batch, labels);
    const GradientSet d = backward_presumed(net, tq, labels);

    DescentReport rep;
    rep.grad_norm = grad_l2(d);
    if (rep.grad_norm == 0.0) {
        rep.flag = "flat";
        return rep;
    }

    double lsb = 0.0;  // finest fixed activation step
    if (a.input.fmt) lsb = a.input.fmt->lsb();
    for (const auto& s : a.acts)
        if (s.fmt) lsb = lsb == 0.0 ? s.fmt->lsb() : std::min(lsb, s.fmt->lsb());

    double eta;
    if (lsb == 0.0) {
        eta = 1e-5 / rep.grad_norm;
    } else {
        // Probe the float pass to size eta: largest pre-activation swing per
        // unit step along d, then scale so the swing is ~step_scale LSBs.
        const double probe_eta = 1e-6 / rep.grad_norm;
        const Trace t0 = forward_float(net, params, batch, labels);
        const Trace t1 = forward_float(net, perturbed(params, d, probe_eta), batch, labels);
        double swing = 0.0;
        for (size_t l = 0; l < t0.layers.size(); ++l)
            for (size_t i = 0; i < t0.layers[l].pre.data.size(); ++i)
                swing = std::max(swing, std::fabs(t1.layers[l].pre.data[i] -
                                                  t0.layers[l].pre.data[i]));
        if (swing == 0.0) {
            rep.flag = "flat";
            return rep;
        }
        eta = probe_eta * step_scale * lsb / swing;
    }
    rep.eta = eta;

    const Trace tp = forward_quantized(net, perturbed(params, d, eta), a, batch, labels);
    const Trace tm = forward_quantized(net, perturbed(params, d, -eta), a, batch, labels);
    if (tp.loss == tm.loss) {
        rep.flag = "flat";
        return rep;
    }
    rep.delta = (tp.loss - tm.loss) / (2.0 * eta * rep.grad_norm);
    rep.sign = rep.delta > 0.0 ? 1 : -1;
    rep.flag = "ok";
    return rep;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("spearman: need two equal-length series");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = (double(i) + double(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) { ma += ra[i]; mb += rb[i]; }
    ma /= n; mb /= n;
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

}  // namespace fixnet
