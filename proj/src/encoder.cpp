#include "speechssl/encoder.hpp"

#include "speechssl/rng.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>

namespace speechssl {

void EncoderConfig::validate() const {
    if (num_layers < 1) throw std::invalid_argument("encoder: num_layers must be >= 1");
    if (hidden < 1 || ffn < 1 || heads < 1 || input_dim < 1) {
        throw std::invalid_argument("encoder: widths must be >= 1");
    }
    if (hidden % heads != 0) {
        throw std::invalid_argument("encoder: hidden (" + std::to_string(hidden) +
                                    ") not divisible by heads (" + std::to_string(heads) + ")");
    }
    if (conv_kernel < 1 || conv_kernel % 2 == 0) {
        throw std::invalid_argument("encoder: conv_kernel must be odd");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw std::invalid_argument("encoder: dropout must be in [0, 1)");
    }
}

std::vector<ParamShape> encoder_parameter_shapes(const EncoderConfig& cfg) {
    cfg.validate();
    const int h = cfg.hidden;
    const int dk = h / cfg.heads;
    std::vector<ParamShape> out = {
        {"extractor.conv1.weight", {3, cfg.input_dim, h}},
        {"extractor.conv1.bias", {h}},
        {"extractor.conv2.weight", {3, h, h}},
        {"extractor.conv2.bias", {h}},
        {"extractor.linear.weight", {h, h}},
        {"extractor.linear.bias", {h}},
    };
    auto norm = [&](const std::string& p) {
        out.push_back({p + ".gamma", {h}});
        out.push_back({p + ".beta", {h}});
    };
    auto linear = [&](const std::string& p, int in, int o, bool bias) {
        out.push_back({p + ".weight", {in, o}});
        if (bias) out.push_back({p + ".bias", {o}});
    };
    auto ffn = [&](const std::string& p) {
        norm(p + ".norm");
        linear(p + ".linear1", h, cfg.ffn, true);
        linear(p + ".linear2", cfg.ffn, h, true);
    };
    for (int i = 0; i < cfg.num_layers; ++i) {
        const std::string l = "layers." + std::to_string(i) + ".";
        ffn(l + "ffn1");
        norm(l + "attn.norm");
        linear(l + "attn.query", h, h, true);
        linear(l + "attn.key", h, h, true);
        linear(l + "attn.value", h, h, true);
        linear(l + "attn.out", h, h, true);
        linear(l + "attn.pos", h, h, false);
        out.push_back({l + "attn.pos_bias_u", {cfg.heads, dk}});
        out.push_back({l + "attn.pos_bias_v", {cfg.heads, dk}});
        norm(l + "conv.norm");
        linear(l + "conv.pointwise1", h, 2 * h, true);
        out.push_back({l + "conv.depthwise.weight", {cfg.conv_kernel, h}});
        out.push_back({l + "conv.depthwise.bias", {h}});
        norm(l + "conv.inner_norm");
        linear(l + "conv.pointwise2", h, h, true);
        ffn(l + "ffn2");
        norm(l + "final_norm");
    }
    norm("final_norm");
    return out;
}

std::int64_t count_parameters(const std::vector<ParamShape>& shapes) {
    std::int64_t n = 0;
    for (const auto& s : shapes) n += s.numel();
    return n;
}

int extractor_output_length(int num_frames) {
    if (num_frames < kMinExtractorFrames) {
        throw std::invalid_argument("utterance too short for the feature extractor (" +
                                    std::to_string(num_frames) + " frames, need " +
                                    std::to_string(kMinExtractorFrames) + ")");
    }
    return (num_frames / 2) / 2;
}

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
Param<T>* ParamStore<T>::add(std::string name, std::vector<int> shape) {
    if (find(name)) throw std::logic_error("duplicate parameter " + name);
    auto p = std::make_unique<Param<T>>();
    const auto [rows, cols] = storage_dims(shape);
    p->name = std::move(name);
    p->shape = std::move(shape);
    p->value = Mat<T>::Zero(rows, cols);
    p->grad = Mat<T>::Zero(rows, cols);
    params_.push_back(std::move(p));
    return params_.back().get();
}

template <typename T>
Param<T>* ParamStore<T>::find(const std::string& name) {
    for (auto& p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

template <typename T>
const Param<T>* ParamStore<T>::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

template <typename T>
std::vector<Param<T>*> ParamStore<T>::all() {
    std::vector<Param<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

template <typename T>
std::vector<const Param<T>*> ParamStore<T>::all() const {
    std::vector<const Param<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& p : params_) p->grad.setZero();
}

template <typename T>
std::int64_t ParamStore<T>::numel() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p->numel();
    return n;
}

template <typename T>
void init_parameter(Param<T>& p, std::uint64_t seed) {
    auto ends_with = [&](const std::string& suffix) {
        return p.name.size() >= suffix.size() &&
               p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".bias") || ends_with(".beta")) {
        p.value.setZero();
        return;
    }
    if (ends_with(".gamma")) {
        p.value.setOnes();
        return;
    }
    double bound;
    if (ends_with("pos_bias_u") || ends_with("pos_bias_v")) {
        bound = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    } else {
        bound = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
    }
    auto rng = make_stream({seed, stream_tag::kEncoderInit, hash_string(p.name)});
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(uni(rng));
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kLayerNormEps = 1e-5;

template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const Param<T>* w, const Param<T>* b) {
    Mat<T> y = x * w->value;
    if (b) y.rowwise() += b->value.row(0);
    return y;
}

template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& dy, Param<T>* w, Param<T>* b) {
    w->grad.noalias() += x.transpose() * dy;
    if (b) b->grad.row(0) += dy.colwise().sum();
    return dy * w->value.transpose();
}

template <typename T>
struct NormCache {
    Mat<T> xhat;
    ColVec<T> rstd;
};

template <typename T>
Mat<T> norm_forward(const Mat<T>& x, const Param<T>* gamma, const Param<T>* beta,
                    NormCache<T>& c) {
    const ColVec<T> mean = x.rowwise().mean();
    Mat<T> centred = x.colwise() - mean;
    const ColVec<T> var = centred.array().square().rowwise().mean();
    c.rstd = (var.array() + static_cast<T>(kLayerNormEps)).rsqrt();
    c.xhat = centred.array().colwise() * c.rstd.array();
    Mat<T> y = c.xhat.array().rowwise() * gamma->value.row(0).array();
    y.rowwise() += beta->value.row(0);
    return y;
}

template <typename T>
Mat<T> norm_backward(const NormCache<T>& c, const Mat<T>& dy, Param<T>* gamma, Param<T>* beta) {
    gamma->grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    beta->grad.row(0) += dy.colwise().sum();
    const Mat<T> g = dy.array().rowwise() * gamma->value.row(0).array();
    const ColVec<T> mean_g = g.rowwise().mean();
    const ColVec<T> mean_gx = (g.array() * c.xhat.array()).rowwise().mean();
    Mat<T> dx = g.colwise() - mean_g;
    dx.array() -= c.xhat.array().colwise() * mean_gx.array();
    dx.array().colwise() *= c.rstd.array();
    return dx;
}

template <typename T>
Mat<T> sigmoid(const Mat<T>& x) {
    return (T(1) / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
Mat<T> swish(const Mat<T>& x) {
    return (x.array() * sigmoid(x).array()).matrix();
}

template <typename T>
Mat<T> swish_backward(const Mat<T>& x, const Mat<T>& dy) {
    const Mat<T> s = sigmoid(x);
    return (dy.array() * s.array() * (T(1) + x.array() * (T(1) - s.array()))).matrix();
}

template <typename T>
Mat<T> glu(const Mat<T>& z) {
    const Eigen::Index h = z.cols() / 2;
    return (z.leftCols(h).array() * sigmoid<T>(z.rightCols(h)).array()).matrix();
}

template <typename T>
Mat<T> glu_backward(const Mat<T>& z, const Mat<T>& dy) {
    const Eigen::Index h = z.cols() / 2;
    const Mat<T> a = z.leftCols(h);
    const Mat<T> s = sigmoid<T>(z.rightCols(h));
    Mat<T> dz(z.rows(), z.cols());
    dz.leftCols(h) = (dy.array() * s.array()).matrix();
    dz.rightCols(h) = (dy.array() * a.array() * s.array() * (T(1) - s.array())).matrix();
    return dz;
}

// Entries are 0 or 1/(1-p); empty when dropout is inactive.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, RngStream* rng) {
    if (!rng || p <= 0.0) return {};
    Mat<T> m(rows, cols);
    std::bernoulli_distribution keep(1.0 - p);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : T(0);
    return m;
}

template <typename T>
Mat<T> apply_dropout(const Mat<T>& x, const Mat<T>& mask) {
    if (mask.size() == 0) return x;
    return x.cwiseProduct(mask);
}

// Kernel-3, stride-2 convolution over time; frames past the end read as zero.
// Output row i sees input rows 2i, 2i+1, 2i+2.
template <typename T>
Mat<T> im2col_stride2(const Mat<T>& x, int out_len) {
    const Eigen::Index cin = x.cols();
    Mat<T> col = Mat<T>::Zero(out_len, 3 * cin);
    for (int i = 0; i < out_len; ++i) {
        for (int m = 0; m < 3; ++m) {
            const int src = 2 * i + m;
            if (src < x.rows()) col.block(i, m * cin, 1, cin) = x.row(src);
        }
    }
    return col;
}

template <typename T>
Mat<T> col2im_stride2(const Mat<T>& dcol, int in_len, Eigen::Index cin) {
    Mat<T> dx = Mat<T>::Zero(in_len, cin);
    for (Eigen::Index i = 0; i < dcol.rows(); ++i) {
        for (int m = 0; m < 3; ++m) {
            const Eigen::Index src = 2 * i + m;
            if (src < in_len) dx.row(src) += dcol.block(i, m * cin, 1, cin);
        }
    }
    return dx;
}

template <typename T>
Mat<T> depthwise_forward(const Mat<T>& x, const Param<T>* w, const Param<T>* b) {
    const Eigen::Index len = x.rows();
    const Eigen::Index k = w->value.rows();
    const Eigen::Index pad = (k - 1) / 2;
    Mat<T> y(len, x.cols());
    y.rowwise() = b->value.row(0);
    for (Eigen::Index t = 0; t < len; ++t) {
        for (Eigen::Index m = 0; m < k; ++m) {
            const Eigen::Index src = t + m - pad;
            if (src < 0 || src >= len) continue;
            y.row(t).array() += w->value.row(m).array() * x.row(src).array();
        }
    }
    return y;
}

template <typename T>
Mat<T> depthwise_backward(const Mat<T>& x, const Mat<T>& dy, Param<T>* w, Param<T>* b) {
    const Eigen::Index len = x.rows();
    const Eigen::Index k = w->value.rows();
    const Eigen::Index pad = (k - 1) / 2;
    b->grad.row(0) += dy.colwise().sum();
    Mat<T> dx = Mat<T>::Zero(len, x.cols());
    for (Eigen::Index t = 0; t < len; ++t) {
        for (Eigen::Index m = 0; m < k; ++m) {
            const Eigen::Index src = t + m - pad;
            if (src < 0 || src >= len) continue;
            w->grad.row(m).array() += dy.row(t).array() * x.row(src).array();
            dx.row(src).array() += dy.row(t).array() * w->value.row(m).array();
        }
    }
    return dx;
}

// Sinusoidal table for relative offsets L-1, L-2, ..., -(L-1); row m holds
// offset r = L-1-m.
template <typename T>
Mat<T> relative_position_table(int len, int dim) {
    Mat<T> pe(2 * len - 1, dim);
    for (int m = 0; m < 2 * len - 1; ++m) {
        const double r = static_cast<double>(len - 1 - m);
        for (int c = 0; c < dim; ++c) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(c - c % 2) / dim);
            pe(m, c) = static_cast<T>(c % 2 == 0 ? std::sin(r * freq) : std::cos(r * freq));
        }
    }
    return pe;
}

}  // namespace

// ---------------------------------------------------------------------------
// Caches

template <typename T>
struct FfnCache {
    NormCache<T> norm;
    Mat<T> xn, h, a, mask_inner, mask_out;
};

template <typename T>
struct AttentionCache {
    NormCache<T> norm;
    Mat<T> xn, q, k, v, pe, p, ctx, mask_out;
    std::vector<Mat<T>> probs, dropped, masks;
};

template <typename T>
struct ConvCache {
    NormCache<T> norm, inner;
    Mat<T> xn, z, g, d, n, a, mask_out;
};

template <typename T>
struct LayerCache {
    FfnCache<T> ffn1, ffn2;
    AttentionCache<T> attn;
    ConvCache<T> conv;
    NormCache<T> final_norm;
};

template <typename T>
struct ExtractorCache {
    int in_len = 0, mid_len = 0;
    Mat<T> col1, pre1, col2, pre2, act2;
};

template <typename T>
struct Encoder<T>::Cache {
    bool has_extractor = false;
    std::vector<int> lengths;
    std::vector<ExtractorCache<T>> extractor;
    std::vector<std::vector<LayerCache<T>>> layers;  // [utterance][layer]
    std::vector<NormCache<T>> final_norm;
};

// ---------------------------------------------------------------------------
// Conformer layer

template <typename T>
struct Encoder<T>::Layer {
    struct Ffn {
        Param<T>*norm_g, *norm_b, *w1, *b1, *w2, *b2;
    };
    Ffn ffn1{}, ffn2{};
    Param<T>*attn_norm_g, *attn_norm_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *wpos, *pos_u,
        *pos_v;
    Param<T>*conv_norm_g, *conv_norm_b, *pw1_w, *pw1_b, *dw_w, *dw_b, *inner_g, *inner_b, *pw2_w,
        *pw2_b;
    Param<T>*final_g, *final_b;
    int heads = 1;
    double dropout = 0.0;

    Layer(ParamStore<T>& store, int index, int num_heads, double p) : heads(num_heads), dropout(p) {
        const std::string l = "layers." + std::to_string(index) + ".";
        auto get = [&](const std::string& n) {
            Param<T>* q = store.find(l + n);
            if (!q) throw std::logic_error("missing parameter " + l + n);
            return q;
        };
        auto bind_ffn = [&](Ffn& f, const std::string& n) {
            f.norm_g = get(n + ".norm.gamma");
            f.norm_b = get(n + ".norm.beta");
            f.w1 = get(n + ".linear1.weight");
            f.b1 = get(n + ".linear1.bias");
            f.w2 = get(n + ".linear2.weight");
            f.b2 = get(n + ".linear2.bias");
        };
        bind_ffn(ffn1, "ffn1");
        bind_ffn(ffn2, "ffn2");
        attn_norm_g = get("attn.norm.gamma");
        attn_norm_b = get("attn.norm.beta");
        wq = get("attn.query.weight");
        bq = get("attn.query.bias");
        wk = get("attn.key.weight");
        bk = get("attn.key.bias");
        wv = get("attn.value.weight");
        bv = get("attn.value.bias");
        wo = get("attn.out.weight");
        bo = get("attn.out.bias");
        wpos = get("attn.pos.weight");
        pos_u = get("attn.pos_bias_u");
        pos_v = get("attn.pos_bias_v");
        conv_norm_g = get("conv.norm.gamma");
        conv_norm_b = get("conv.norm.beta");
        pw1_w = get("conv.pointwise1.weight");
        pw1_b = get("conv.pointwise1.bias");
        dw_w = get("conv.depthwise.weight");
        dw_b = get("conv.depthwise.bias");
        inner_g = get("conv.inner_norm.gamma");
        inner_b = get("conv.inner_norm.beta");
        pw2_w = get("conv.pointwise2.weight");
        pw2_b = get("conv.pointwise2.bias");
        final_g = get("final_norm.gamma");
        final_b = get("final_norm.beta");
    }

    Mat<T> ffn_forward(const Ffn& f, const Mat<T>& x, FfnCache<T>& c, RngStream* rng) const {
        c.xn = norm_forward(x, f.norm_g, f.norm_b, c.norm);
        c.h = linear_forward(c.xn, f.w1, f.b1);
        c.a = swish(c.h);
        c.mask_inner = dropout_mask<T>(c.a.rows(), c.a.cols(), dropout, rng);
        const Mat<T> o = linear_forward(apply_dropout(c.a, c.mask_inner), f.w2, f.b2);
        c.mask_out = dropout_mask<T>(o.rows(), o.cols(), dropout, rng);
        return apply_dropout(o, c.mask_out);
    }

    Mat<T> ffn_backward(const Ffn& f, const Mat<T>& dout, const FfnCache<T>& c) const {
        const Mat<T> d_o = apply_dropout(dout, c.mask_out);
        const Mat<T> da = apply_dropout(
            linear_backward(apply_dropout(c.a, c.mask_inner), d_o, f.w2, f.b2), c.mask_inner);
        const Mat<T> dh = swish_backward(c.h, da);
        const Mat<T> dxn = linear_backward(c.xn, dh, f.w1, f.b1);
        return norm_backward(c.norm, dxn, f.norm_g, f.norm_b);
    }

    Mat<T> attention_forward(const Mat<T>& x, AttentionCache<T>& c, RngStream* rng) const {
        const int len = static_cast<int>(x.rows());
        const int hidden = static_cast<int>(x.cols());
        const int dk = hidden / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        c.xn = norm_forward(x, attn_norm_g, attn_norm_b, c.norm);
        c.q = linear_forward(c.xn, wq, bq);
        c.k = linear_forward(c.xn, wk, bk);
        c.v = linear_forward(c.xn, wv, bv);
        c.pe = relative_position_table<T>(len, hidden);
        c.p = c.pe * wpos->value;
        c.ctx.resize(len, hidden);
        c.probs.assign(heads, {});
        c.dropped.assign(heads, {});
        c.masks.assign(heads, {});
        for (int hd = 0; hd < heads; ++hd) {
            const Eigen::Index off = static_cast<Eigen::Index>(hd) * dk;
            const Mat<T> qu = c.q.middleCols(off, dk).rowwise() + pos_u->value.row(hd);
            const Mat<T> qv = c.q.middleCols(off, dk).rowwise() + pos_v->value.row(hd);
            const Mat<T> content = qu * c.k.middleCols(off, dk).transpose();
            const Mat<T> position = qv * c.p.middleCols(off, dk).transpose();  // L x (2L-1)
            Mat<T> scores(len, len);
            for (int i = 0; i < len; ++i) {
                for (int j = 0; j < len; ++j) {
                    scores(i, j) = (content(i, j) + position(i, len - 1 - i + j)) * scale;
                }
            }
            Mat<T> probs(len, len);
            for (int i = 0; i < len; ++i) {
                const T mx = scores.row(i).maxCoeff();
                probs.row(i) = (scores.row(i).array() - mx).exp().matrix();
                probs.row(i) /= probs.row(i).sum();
            }
            c.masks[hd] = dropout_mask<T>(len, len, dropout, rng);
            c.dropped[hd] = apply_dropout(probs, c.masks[hd]);
            c.ctx.middleCols(off, dk) = c.dropped[hd] * c.v.middleCols(off, dk);
            c.probs[hd] = std::move(probs);
        }
        const Mat<T> o = linear_forward(c.ctx, wo, bo);
        c.mask_out = dropout_mask<T>(o.rows(), o.cols(), dropout, rng);
        return apply_dropout(o, c.mask_out);
    }

    Mat<T> attention_backward(const Mat<T>& dout, const AttentionCache<T>& c) const {
        const int len = static_cast<int>(c.q.rows());
        const int hidden = static_cast<int>(c.q.cols());
        const int dk = hidden / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
        const Mat<T> dctx = linear_backward(c.ctx, apply_dropout(dout, c.mask_out), wo, bo);
        Mat<T> dq = Mat<T>::Zero(len, hidden);
        Mat<T> dkm = Mat<T>::Zero(len, hidden);
        Mat<T> dv = Mat<T>::Zero(len, hidden);
        Mat<T> dp = Mat<T>::Zero(2 * len - 1, hidden);
        for (int hd = 0; hd < heads; ++hd) {
            const Eigen::Index off = static_cast<Eigen::Index>(hd) * dk;
            const Mat<T> dctx_h = dctx.middleCols(off, dk);
            dv.middleCols(off, dk) = c.dropped[hd].transpose() * dctx_h;
            const Mat<T> ddrop = dctx_h * c.v.middleCols(off, dk).transpose();
            const Mat<T> dprobs = apply_dropout(ddrop, c.masks[hd]);
            const Mat<T>& probs = c.probs[hd];
            Mat<T> dscores(len, len);
            for (int i = 0; i < len; ++i) {
                const T dot = probs.row(i).dot(dprobs.row(i));
                dscores.row(i) = (probs.row(i).array() * (dprobs.row(i).array() - dot)).matrix();
            }
            dscores *= scale;
            Mat<T> dposition = Mat<T>::Zero(len, 2 * len - 1);
            for (int i = 0; i < len; ++i) {
                for (int j = 0; j < len; ++j) dposition(i, len - 1 - i + j) += dscores(i, j);
            }
            const Mat<T> qu = c.q.middleCols(off, dk).rowwise() + pos_u->value.row(hd);
            const Mat<T> qv = c.q.middleCols(off, dk).rowwise() + pos_v->value.row(hd);
            const Mat<T> dqu = dscores * c.k.middleCols(off, dk);
            const Mat<T> dqv = dposition * c.p.middleCols(off, dk);
            dkm.middleCols(off, dk) = dscores.transpose() * qu;
            dp.middleCols(off, dk) = dposition.transpose() * qv;
            dq.middleCols(off, dk) = dqu + dqv;
            pos_u->grad.row(hd) += dqu.colwise().sum();
            pos_v->grad.row(hd) += dqv.colwise().sum();
        }
        wpos->grad.noalias() += c.pe.transpose() * dp;
        Mat<T> dxn = linear_backward(c.xn, dq, wq, bq);
        dxn += linear_backward(c.xn, dkm, wk, bk);
        dxn += linear_backward(c.xn, dv, wv, bv);
        return norm_backward(c.norm, dxn, attn_norm_g, attn_norm_b);
    }

    Mat<T> conv_forward(const Mat<T>& x, ConvCache<T>& c, RngStream* rng) const {
        c.xn = norm_forward(x, conv_norm_g, conv_norm_b, c.norm);
        c.z = linear_forward(c.xn, pw1_w, pw1_b);
        c.g = glu(c.z);
        c.d = depthwise_forward(c.g, dw_w, dw_b);
        c.n = norm_forward(c.d, inner_g, inner_b, c.inner);
        c.a = swish(c.n);
        const Mat<T> o = linear_forward(c.a, pw2_w, pw2_b);
        c.mask_out = dropout_mask<T>(o.rows(), o.cols(), dropout, rng);
        return apply_dropout(o, c.mask_out);
    }

    Mat<T> conv_backward(const Mat<T>& dout, const ConvCache<T>& c) const {
        const Mat<T> da = linear_backward(c.a, apply_dropout(dout, c.mask_out), pw2_w, pw2_b);
        const Mat<T> dn = swish_backward(c.n, da);
        const Mat<T> dd = norm_backward(c.inner, dn, inner_g, inner_b);
        const Mat<T> dg = depthwise_backward(c.g, dd, dw_w, dw_b);
        const Mat<T> dz = glu_backward(c.z, dg);
        const Mat<T> dxn = linear_backward(c.xn, dz, pw1_w, pw1_b);
        return norm_backward(c.norm, dxn, conv_norm_g, conv_norm_b);
    }

    // half-FFN -> self-attention -> convolution -> half-FFN -> layer norm,
    // residual around each block.
    Mat<T> forward(const Mat<T>& x, LayerCache<T>& c, RngStream* rng) const {
        const T half = static_cast<T>(0.5);
        Mat<T> y = x + half * ffn_forward(ffn1, x, c.ffn1, rng);
        y += attention_forward(y, c.attn, rng);
        y += conv_forward(y, c.conv, rng);
        y += half * ffn_forward(ffn2, y, c.ffn2, rng);
        return norm_forward(y, final_g, final_b, c.final_norm);
    }

    Mat<T> backward(const Mat<T>& dy, const LayerCache<T>& c) const {
        const T half = static_cast<T>(0.5);
        Mat<T> g = norm_backward(c.final_norm, dy, final_g, final_b);
        g += ffn_backward(ffn2, (half * g).eval(), c.ffn2);
        g += conv_backward(g, c.conv);
        g += attention_backward(g, c.attn);
        g += ffn_backward(ffn1, (half * g).eval(), c.ffn1);
        return g;
    }
};

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    for (const auto& s : encoder_parameter_shapes(cfg_)) {
        init_parameter(*store_.add(s.name, s.shape), seed_);
    }
    conv1_w_ = store_.find("extractor.conv1.weight");
    conv1_b_ = store_.find("extractor.conv1.bias");
    conv2_w_ = store_.find("extractor.conv2.weight");
    conv2_b_ = store_.find("extractor.conv2.bias");
    lin_w_ = store_.find("extractor.linear.weight");
    lin_b_ = store_.find("extractor.linear.bias");
    final_gamma_ = store_.find("final_norm.gamma");
    final_beta_ = store_.find("final_norm.beta");
    for (int i = 0; i < cfg_.num_layers; ++i) {
        layers_.push_back(std::make_unique<Layer>(store_, i, cfg_.heads, cfg_.dropout));
    }
}

template <typename T>
Encoder<T>::~Encoder() = default;
template <typename T>
Encoder<T>::Encoder(Encoder&&) noexcept = default;
template <typename T>
Encoder<T>& Encoder<T>::operator=(Encoder&&) noexcept = default;

template <typename T>
void Encoder<T>::set_training(bool training, std::uint64_t step_key) {
    training_ = training;
    step_key_ = step_key;
}

template <typename T>
std::vector<Mat<T>> Encoder<T>::extract(const std::vector<Mat<T>>& mels,
                                        const std::vector<int>& lengths) {
    if (mels.size() != lengths.size()) {
        throw std::invalid_argument("extract: batch has " + std::to_string(mels.size()) +
                                    " inputs but " + std::to_string(lengths.size()) + " lengths");
    }
    cache_ = std::make_unique<Cache>();
    cache_->has_extractor = true;
    cache_->extractor.resize(mels.size());
    std::vector<Mat<T>> out;
    out.reserve(mels.size());
    for (std::size_t b = 0; b < mels.size(); ++b) {
        const int len = lengths[b];
        if (len > mels[b].rows() || mels[b].cols() != cfg_.input_dim) {
            throw std::invalid_argument("extract: utterance " + std::to_string(b) +
                                        " has inconsistent shape");
        }
        const int out_len = extractor_output_length(len);
        auto& c = cache_->extractor[b];
        c.in_len = len;
        c.mid_len = len / 2;
        c.col1 = im2col_stride2<T>(mels[b].topRows(len), c.mid_len);
        c.pre1 = linear_forward(c.col1, conv1_w_, conv1_b_);
        const Mat<T> act1 = c.pre1.cwiseMax(T(0));
        c.col2 = im2col_stride2<T>(act1, out_len);
        c.pre2 = linear_forward(c.col2, conv2_w_, conv2_b_);
        c.act2 = c.pre2.cwiseMax(T(0));
        out.push_back(linear_forward(c.act2, lin_w_, lin_b_));
    }
    return out;
}

template <typename T>
EncoderOutput<T> Encoder<T>::forward(const std::vector<Mat<T>>& features,
                                     const std::vector<int>& lengths) {
    if (features.size() != lengths.size()) {
        throw std::invalid_argument("forward: features/lengths size mismatch");
    }
    // A forward pass that follows extract() keeps the front-end cache.
    if (!cache_ || !cache_->has_extractor || cache_->extractor.size() != features.size()) {
        cache_ = std::make_unique<Cache>();
    }
    cache_->lengths = lengths;
    cache_->layers.assign(features.size(), std::vector<LayerCache<T>>(layers_.size()));
    cache_->final_norm.assign(features.size(), {});
    EncoderOutput<T> out;
    out.lengths = lengths;
    out.layer_states.resize(features.size());
    for (std::size_t b = 0; b < features.size(); ++b) {
        const int len = lengths[b];
        if (len < 1 || len > features[b].rows() || features[b].cols() != cfg_.hidden) {
            throw std::invalid_argument("forward: utterance " + std::to_string(b) +
                                        " has inconsistent shape");
        }
        std::optional<RngStream> rng;
        if (training_ && cfg_.dropout > 0.0) {
            rng.emplace(make_stream({step_key_, stream_tag::kDropout, b}));
        }
        RngStream* r = rng ? &*rng : nullptr;
        auto& states = out.layer_states[b];
        states.reserve(layers_.size() + 1);
        states.push_back(features[b].topRows(len));
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            states.push_back(layers_[i]->forward(states.back(), cache_->layers[b][i], r));
        }
        states.back() = norm_forward(Mat<T>(states.back()), final_gamma_, final_beta_,
                                     cache_->final_norm[b]);
    }
    return out;
}

template <typename T>
EncoderOutput<T> Encoder<T>::encode(const std::vector<Mat<T>>& mels,
                                    const std::vector<int>& lengths) {
    auto features = extract(mels, lengths);
    std::vector<int> out_lengths;
    for (const auto& f : features) out_lengths.push_back(static_cast<int>(f.rows()));
    return forward(features, out_lengths);
}

template <typename T>
void Encoder<T>::backward(const std::vector<std::vector<Mat<T>>>& state_grads) {
    if (!cache_ || cache_->layers.empty()) {
        throw std::logic_error("encoder backward called without a preceding forward pass");
    }
    if (state_grads.size() != cache_->layers.size()) {
        throw std::invalid_argument("backward: gradient batch size mismatch");
    }
    const std::size_t n_layers = layers_.size();
    for (std::size_t b = 0; b < state_grads.size(); ++b) {
        const int len = cache_->lengths[b];
        const int hidden = cfg_.hidden;
        auto grad_at = [&](std::size_t k) -> Mat<T> {
            if (k < state_grads[b].size() && state_grads[b][k].size() > 0) {
                return state_grads[b][k];
            }
            return Mat<T>::Zero(len, hidden);
        };
        Mat<T> g = norm_backward(cache_->final_norm[b], grad_at(n_layers), final_gamma_,
                                 final_beta_);
        for (std::size_t i = n_layers; i-- > 0;) {
            g = layers_[i]->backward(g, cache_->layers[b][i]);
            g += grad_at(i);
        }
        if (!cache_->has_extractor) continue;
        const auto& c = cache_->extractor[b];
        const Mat<T> dact2 = linear_backward(c.act2, g, lin_w_, lin_b_);
        const Mat<T> dpre2 = (c.pre2.array() > T(0)).select(dact2, T(0));
        const Mat<T> dcol2 = linear_backward(c.col2, dpre2, conv2_w_, conv2_b_);
        const Mat<T> dact1 = col2im_stride2<T>(dcol2, c.mid_len, cfg_.hidden);
        const Mat<T> dpre1 = (c.pre1.array() > T(0)).select(dact1, T(0));
        // Gradient w.r.t. the input Mel frames is not needed.
        linear_backward(c.col1, dpre1, conv1_w_, conv1_b_);
    }
}

template <typename T>
const Mat<T>& Encoder<T>::attention_weights(int utterance, int layer, int head) const {
    if (!cache_ || cache_->layers.empty()) throw std::logic_error("no forward pass recorded");
    return cache_->layers.at(static_cast<std::size_t>(utterance))
        .at(static_cast<std::size_t>(layer))
        .attn.probs.at(static_cast<std::size_t>(head));
}

// ---------------------------------------------------------------------------
// Layer-weighted sum

template <typename T>
static std::vector<T> softmax_weights(const std::vector<T>& logits) {
    T mx = logits.front();
    for (T v : logits) mx = std::max(mx, v);
    std::vector<T> w(logits.size());
    T total = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) total += (w[i] = std::exp(logits[i] - mx));
    for (T& v : w) v /= total;
    return w;
}

template <typename T>
Mat<T> weighted_sum(const std::vector<Mat<T>>& layer_states, const std::vector<T>& logits) {
    if (layer_states.empty() || logits.size() != layer_states.size()) {
        throw std::invalid_argument("weighted_sum: " + std::to_string(logits.size()) +
                                    " logits for " + std::to_string(layer_states.size()) +
                                    " layer states");
    }
    const auto w = softmax_weights(logits);
    Mat<T> out = Mat<T>::Zero(layer_states[0].rows(), layer_states[0].cols());
    for (std::size_t k = 0; k < layer_states.size(); ++k) out += w[k] * layer_states[k];
    return out;
}

template <typename T>
void weighted_sum_backward(const std::vector<Mat<T>>& layer_states, const std::vector<T>& logits,
                           const Mat<T>& grad_out, std::vector<Mat<T>>* grad_states,
                           std::vector<T>* grad_logits) {
    if (logits.size() != layer_states.size()) {
        throw std::invalid_argument("weighted_sum_backward: length mismatch");
    }
    const auto w = softmax_weights(logits);
    const std::size_t n = layer_states.size();
    if (grad_states) {
        grad_states->resize(n);
        for (std::size_t k = 0; k < n; ++k) (*grad_states)[k] = w[k] * grad_out;
    }
    if (grad_logits) {
        std::vector<T> dots(n);
        T mean = 0;
        for (std::size_t k = 0; k < n; ++k) {
            dots[k] = (grad_out.array() * layer_states[k].array()).sum();
            mean += w[k] * dots[k];
        }
        grad_logits->resize(n);
        for (std::size_t k = 0; k < n; ++k) (*grad_logits)[k] = w[k] * (dots[k] - mean);
    }
}

template class ParamStore<float>;
template class ParamStore<double>;
template void init_parameter<float>(Param<float>&, std::uint64_t);
template void init_parameter<double>(Param<double>&, std::uint64_t);
template class Encoder<float>;
template class Encoder<double>;
template Mat<float> weighted_sum<float>(const std::vector<Mat<float>>&, const std::vector<float>&);
template Mat<double> weighted_sum<double>(const std::vector<Mat<double>>&,
                                          const std::vector<double>&);
template void weighted_sum_backward<float>(const std::vector<Mat<float>>&,
                                           const std::vector<float>&, const Mat<float>&,
                                           std::vector<Mat<float>>*, std::vector<float>*);
template void weighted_sum_backward<double>(const std::vector<Mat<double>>&,
                                            const std::vector<double>&, const Mat<double>&,
                                            std::vector<Mat<double>>*, std::vector<double>*);

}  // namespace speechssl
