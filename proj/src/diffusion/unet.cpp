#include "tedm/diffusion/unet.hpp"

#include <cmath>
#include <sstream>

#include "tedm/rng.hpp"

namespace tedm::diffusion {

std::string DenoiserConfig::describe() const {
  std::ostringstream os;
  os << "in=" << in_channels << " out=" << out_channels << " size=" << height << "x" << width
     << " widths=";
  for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
  os << " mid=" << mid_width << " time_dim=" << time_dim
     << " time_conditioned=" << (time_conditioned ? 1 : 0) << " taps=";
  for (std::size_t i = 0; i < taps.size(); ++i) os << (i ? "," : "") << taps[i];
  return os.str();
}

void DenoiserConfig::validate() const {
  require(in_channels > 0 && out_channels > 0, ErrorCode::kModelError, "channel counts must be positive");
  require(!widths.empty(), ErrorCode::kModelError, "denoiser needs at least one resolution level");
  for (int w : widths) require(w > 0, ErrorCode::kModelError, "level widths must be positive");
  require(mid_width > 0, ErrorCode::kModelError, "mid width must be positive");
  require(time_dim >= 2 && time_dim % 2 == 0, ErrorCode::kModelError, "time_dim must be even and >= 2");
  const int div = 1 << widths.size();
  require(height > 0 && width > 0 && height % div == 0 && width % div == 0, ErrorCode::kModelError,
          "image size must be divisible by 2^levels");
  require(!taps.empty(), ErrorCode::kModelError, "at least one activation tap is required");
}

namespace {

int tap_width(const DenoiserConfig& c, const std::string& name) {
  const int levels = static_cast<int>(c.widths.size());
  if (name == "mid" || name == "mid.in") return c.mid_width;
  for (int l = 0; l < levels; ++l) {
    if (name == "enc" + std::to_string(l) || name == "dec" + std::to_string(l)) return c.widths[l];
  }
  fail(ErrorCode::kModelError, "unknown activation tap '" + name + "'");
}

}  // namespace

template <typename T>
UNet<T>::UNet(DenoiserConfig config) : config_(std::move(config)) {
  config_.validate();
  const int levels = static_cast<int>(config_.widths.size());
  const int td = config_.time_dim;

  auto add_block = [&](const std::string& name, int cin, int cout, int k, bool act, bool tb) {
    Block b;
    b.cin = cin;
    b.cout = cout;
    b.k = k;
    b.activation = act;
    b.time_bias_enabled = tb;
    b.weight = layout_.add(name + ".weight", {static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                                              static_cast<std::size_t>(k), static_cast<std::size_t>(k)});
    b.bias = layout_.add(name + ".bias", {static_cast<std::size_t>(cout)});
    if (tb) b.time_weight = layout_.add(name + ".time.weight", {static_cast<std::size_t>(cout), static_cast<std::size_t>(td)});
    return b;
  };

  time_w_ = layout_.add("time.weight", {static_cast<std::size_t>(td), static_cast<std::size_t>(td)});
  time_b_ = layout_.add("time.bias", {static_cast<std::size_t>(td)});

  int cin = config_.in_channels;
  for (int l = 0; l < levels; ++l) {
    blocks_.push_back(add_block("enc" + std::to_string(l), cin, config_.widths[l], 3, true, true));
    block_names_.push_back("enc" + std::to_string(l));
    cin = config_.widths[l];
  }
  blocks_.push_back(add_block("mid.in", cin, config_.mid_width, 3, true, true));
  block_names_.push_back("mid.in");
  blocks_.push_back(add_block("mid", config_.mid_width, config_.mid_width, 3, true, true));
  block_names_.push_back("mid");
  int prev = config_.mid_width;
  for (int l = levels - 1; l >= 0; --l) {
    blocks_.push_back(add_block("dec" + std::to_string(l), prev + config_.widths[l], config_.widths[l], 3, true, true));
    block_names_.push_back("dec" + std::to_string(l));
    prev = config_.widths[l];
  }
  out_ = add_block("out", prev, config_.out_channels, 3, false, false);
  for (const auto& tap : config_.taps) tap_width(config_, tap);
  params_.assign(layout_.total(), T(0));
}

template <typename T>
int UNet<T>::tap_channels() const {
  int total = 0;
  for (const auto& tap : config_.taps) total += tap_width(config_, tap);
  return total;
}

template <typename T>
void UNet<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  std::fill(params_.begin(), params_.end(), T(0));
  auto fill = [&](std::size_t offset, std::size_t n, double sd) {
    for (std::size_t i = 0; i < n; ++i) params_[offset + i] = static_cast<T>(rng.normal(0.0, sd));
  };
  const int td = config_.time_dim;
  fill(time_w_, static_cast<std::size_t>(td) * td, std::sqrt(1.0 / td));
  for (const auto& b : blocks_) {
    const int fan_in = b.cin * b.k * b.k;
    fill(b.weight, static_cast<std::size_t>(b.cout) * fan_in, std::sqrt(2.0 / fan_in));
    if (b.time_bias_enabled) fill(b.time_weight, static_cast<std::size_t>(b.cout) * td, std::sqrt(0.5 / td));
  }
  if (!config_.zero_init_output) {
    const int fan_in = out_.cin * out_.k * out_.k;
    fill(out_.weight, static_cast<std::size_t>(out_.cout) * fan_in, std::sqrt(1.0 / fan_in));
  }
}

template <typename T>
nn::Vector<T> UNet<T>::sinusoid(double t) const {
  const int half = config_.time_dim / 2;
  nn::Vector<T> s(config_.time_dim);
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * k / half);
    s[k] = static_cast<T>(std::sin(t * f));
    s[half + k] = static_cast<T>(std::cos(t * f));
  }
  return s;
}

template <typename T>
typename UNet<T>::FMap UNet<T>::block_forward(const Block& b, const FMap& x, const nn::Vector<T>& temb,
                                              BlockCache* bc) const {
  require(x.channels() == b.cin, ErrorCode::kShapeError, "block input channel mismatch");
  nn::Matrix<T> local_cols;
  nn::Matrix<T>& cols = bc ? bc->cols : local_cols;
  nn::im2col(x, b.k, cols);
  nn::ConstMatrixMap<T> w(params_.data() + b.weight, b.cout, static_cast<Eigen::Index>(b.cin) * b.k * b.k);
  nn::Vector<T> shift = nn::ConstVectorMap<T>(params_.data() + b.bias, b.cout);
  if (b.time_bias_enabled) {
    nn::ConstMatrixMap<T> p(params_.data() + b.time_weight, b.cout, config_.time_dim);
    shift.noalias() += p * temb;
  }
  FMap y;
  y.height = x.height;
  y.width = x.width;
  y.values.noalias() = w * cols;
  y.values.colwise() += shift;
  if (bc) {
    bc->pre = y.values;
    bc->height = x.height;
    bc->width = x.width;
    bc->in_channels = x.channels();
  }
  if (b.activation) y.values = y.values.unaryExpr([](T z) { return nn::silu(z); });
  return y;
}

template <typename T>
typename UNet<T>::FMap UNet<T>::block_backward(const Block& b, const BlockCache& bc, const FMap& dy,
                                               const nn::Vector<T>& temb, nn::Vector<T>& dtemb,
                                               std::span<T> grad) const {
  nn::Matrix<T> dz;
  if (b.activation) {
    dz = dy.values.cwiseProduct(bc.pre.unaryExpr([](T z) { return nn::silu_grad(z); }));
  } else {
    dz = dy.values;
  }
  const Eigen::Index kk = static_cast<Eigen::Index>(b.cin) * b.k * b.k;
  nn::MatrixMap<T> dw(grad.data() + b.weight, b.cout, kk);
  dw.noalias() += dz * bc.cols.transpose();
  const nn::Vector<T> dshift = dz.rowwise().sum();
  nn::VectorMap<T>(grad.data() + b.bias, b.cout) += dshift;
  if (b.time_bias_enabled) {
    nn::MatrixMap<T> dp(grad.data() + b.time_weight, b.cout, config_.time_dim);
    dp.noalias() += dshift * temb.transpose();
    nn::ConstMatrixMap<T> p(params_.data() + b.time_weight, b.cout, config_.time_dim);
    dtemb.noalias() += p.transpose() * dshift;
  }
  nn::ConstMatrixMap<T> w(params_.data() + b.weight, b.cout, kk);
  nn::Matrix<T> dcols = w.transpose() * dz;
  FMap dx(b.cin, bc.height, bc.width);
  nn::col2im_add(dcols, b.k, dx);
  return dx;
}

template <typename T>
typename UNet<T>::FMap UNet<T>::forward(const FMap& x, double t, Cache* cache, std::vector<FMap>* taps) const {
  require(x.channels() == config_.in_channels && x.height == config_.height && x.width == config_.width,
          ErrorCode::kShapeError, "denoiser input shape does not match its configuration");
  const int levels = static_cast<int>(config_.widths.size());

  nn::Vector<T> temb = nn::Vector<T>::Zero(config_.time_dim);
  nn::Vector<T> sin_t, pre_t;
  if (config_.time_conditioned) {
    sin_t = sinusoid(t);
    nn::ConstMatrixMap<T> wt(params_.data() + time_w_, config_.time_dim, config_.time_dim);
    pre_t = wt * sin_t + nn::ConstVectorMap<T>(params_.data() + time_b_, config_.time_dim);
    temb = pre_t.unaryExpr([](T z) { return nn::silu(z); });
  }
  if (cache) {
    cache->blocks.assign(blocks_.size(), BlockCache{});
    cache->sinusoid = sin_t;
    cache->time_pre = pre_t;
    cache->time_hidden = temb;
    cache->enc_heights.clear();
    cache->enc_widths.clear();
  }

  std::vector<FMap> outputs(blocks_.size());
  auto run = [&](std::size_t i, const FMap& in) {
    outputs[i] = block_forward(blocks_[i], in, temb, cache ? &cache->blocks[i] : nullptr);
    return std::cref(outputs[i]);
  };

  for (int l = 0; l < levels; ++l) {
    if (l == 0) {
      run(0, x);
    } else {
      run(l, nn::avg_pool2(outputs[l - 1]));
    }
    if (cache) {
      cache->enc_heights.push_back(outputs[l].height);
      cache->enc_widths.push_back(outputs[l].width);
    }
  }
  const std::size_t mid_in = levels, mid = levels + 1;
  run(mid_in, nn::avg_pool2(outputs[levels - 1]));
  run(mid, outputs[mid_in]);
  std::size_t prev = mid;
  for (int l = levels - 1; l >= 0; --l) {
    const std::size_t idx = mid + 1 + (levels - 1 - l);
    FMap up = nn::upsample_nearest2(outputs[prev]);
    FMap cat(up.channels() + outputs[l].channels(), up.height, up.width);
    cat.values.topRows(up.channels()) = up.values;
    cat.values.bottomRows(outputs[l].channels()) = outputs[l].values;
    run(idx, cat);
    prev = idx;
  }
  FMap out = block_forward(out_, outputs[prev], temb, cache ? &cache->out : nullptr);

  if (taps) {
    for (const auto& name : config_.taps) {
      for (std::size_t i = 0; i < block_names_.size(); ++i) {
        if (block_names_[i] == name) taps->push_back(outputs[i]);
      }
    }
  }
  return out;
}

template <typename T>
void UNet<T>::backward(const Cache& cache, const FMap& dout, std::span<T> grad) const {
  require(grad.size() == params_.size(), ErrorCode::kShapeError, "gradient buffer size mismatch");
  require(cache.blocks.size() == blocks_.size(), ErrorCode::kModelError, "backward called without a forward cache");
  const int levels = static_cast<int>(config_.widths.size());
  const nn::Vector<T>& temb = cache.time_hidden;
  nn::Vector<T> dtemb = nn::Vector<T>::Zero(config_.time_dim);

  std::vector<FMap> d_enc(levels);
  for (int l = 0; l < levels; ++l) d_enc[l] = FMap(config_.widths[l], cache.enc_heights[l], cache.enc_widths[l]);

  const std::size_t mid_in = levels, mid = levels + 1;
  FMap d_prev = block_backward(out_, cache.out, dout, temb, dtemb, grad);
  for (int l = 0; l < levels; ++l) {
    const std::size_t idx = mid + 1 + (levels - 1 - l);
    FMap d_cat = block_backward(blocks_[idx], cache.blocks[idx], d_prev, temb, dtemb, grad);
    const int skip_ch = config_.widths[l];
    const int up_ch = d_cat.channels() - skip_ch;
    d_enc[l].values += d_cat.values.bottomRows(skip_ch);
    FMap d_up(up_ch, d_cat.height, d_cat.width);
    d_up.values = d_cat.values.topRows(up_ch);
    d_prev = nn::upsample_nearest2_backward(d_up);
  }
  FMap d_mid_in = block_backward(blocks_[mid], cache.blocks[mid], d_prev, temb, dtemb, grad);
  FMap d_pool = block_backward(blocks_[mid_in], cache.blocks[mid_in], d_mid_in, temb, dtemb, grad);
  d_enc[levels - 1].values += nn::avg_pool2_backward(d_pool, cache.enc_heights[levels - 1],
                                                     cache.enc_widths[levels - 1]).values;
  for (int l = levels - 1; l >= 0; --l) {
    FMap d_in = block_backward(blocks_[l], cache.blocks[l], d_enc[l], temb, dtemb, grad);
    if (l > 0) {
      d_enc[l - 1].values += nn::avg_pool2_backward(d_in, cache.enc_heights[l - 1], cache.enc_widths[l - 1]).values;
    }
  }

  if (config_.time_conditioned) {
    const nn::Vector<T> dpre = dtemb.cwiseProduct(cache.time_pre.unaryExpr([](T z) { return nn::silu_grad(z); }));
    nn::MatrixMap<T>(grad.data() + time_w_, config_.time_dim, config_.time_dim).noalias() +=
        dpre * cache.sinusoid.transpose();
    nn::VectorMap<T>(grad.data() + time_b_, config_.time_dim) += dpre;
  }
}

template class UNet<float>;
template class UNet<double>;

}  // namespace tedm::diffusion
