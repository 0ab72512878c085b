// cmamba: train / encode / decode / eval / probe / bdrate front end.
//
// Exit codes: 0 success, 1 usage or bad argument, 2 I/O failure,
// 3 malformed file (stream, checkpoint, config, CSV), 4 numeric failure.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmamba/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmamba;

namespace {

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

void save_image(const std::string& path, const Tensor& img) {
  const std::string e = lower_ext(path);
  if (e == ".png")
    save_png(path, img);
  else if (e == ".ppm")
    save_ppm(path, img);
  else
    throw std::invalid_argument("unsupported output image format: " + path);
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file: " + path);
}

void require_output_dir(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("empty output path");
  const fs::path dir = fs::absolute(fs::path(path)).parent_path();
  if (!fs::is_directory(dir)) throw IoError("output directory does not exist: " + dir.string());
}

std::vector<std::string> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = lower_ext(e.path());
    if (ext == ".png" || ext == ".ppm") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no .png/.ppm images in " + dir);
  return out;
}

// Index-parallel loop; the first worker exception is rethrown on the caller.
void run_parallel(size_t n, int jobs, const std::function<void(size_t)>& fn) {
  jobs = std::max(1, std::min(jobs, static_cast<int>(n)));
  if (jobs == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

bool parse_double(const std::string& s, double& out) {
  try {
    size_t pos = 0;
    out = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == sep) {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// JSON config: {"model": {...}, "train": {...}}, unknown keys rejected,
// CLI flags override file values.
// ---------------------------------------------------------------------------

[[noreturn]] void bad_config(const std::string& msg) {
  throw FormatError(FormatError::Kind::kBadField, "config: " + msg);
}

void reject_unknown(const json& j, const char* section,
                    std::initializer_list<const char*> keys) {
  if (!j.is_object()) bad_config(std::string(section) + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) bad_config(std::string(section) + ": unknown key \"" + item.key() + "\"");
  }
}

int parse_metric(const std::string& s) {
  if (s == "mse") return 0;
  if (s == "msssim") return 1;
  bad_config("metric must be \"mse\" or \"msssim\"");
}

BlockMode parse_block_mode(const std::string& s) {
  if (s == "hybrid") return BlockMode::kHybrid;
  if (s == "scan_only") return BlockMode::kScanOnly;
  if (s == "conv_only") return BlockMode::kConvOnly;
  bad_config("block_mode must be hybrid, scan_only, or conv_only");
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "dynamic") return FusionMode::kDynamic;
  if (s == "fixed_half") return FusionMode::kFixedHalf;
  bad_config("fusion_mode must be dynamic or fixed_half");
}

struct FullConfig {
  ModelConfig model;
  TrainConfig train;
};

FullConfig load_config(const std::string& path) {
  FullConfig fc;
  if (path.empty()) return fc;
  require_file(path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    bad_config(e.what());
  }
  reject_unknown(j, "top level", {"model", "train"});
  try {
    if (j.contains("model")) {
      const json& m = j["model"];
      reject_unknown(m, "model",
                     {"widths", "latent_channels", "hyper_channels", "blocks_per_stage", "groups",
                      "n_state", "block_mode", "fusion_mode", "mean_centered_round",
                      "hyperprior_only"});
      if (m.contains("widths")) {
        const auto w = m["widths"].get<std::vector<int>>();
        if (w.size() != 4) bad_config("widths must have exactly 4 entries");
        std::copy(w.begin(), w.end(), fc.model.widths.begin());
      }
      if (m.contains("latent_channels")) fc.model.latent_channels = m["latent_channels"].get<int>();
      if (m.contains("hyper_channels")) fc.model.hyper_channels = m["hyper_channels"].get<int>();
      if (m.contains("blocks_per_stage")) fc.model.blocks_per_stage = m["blocks_per_stage"].get<int>();
      if (m.contains("groups")) fc.model.groups = m["groups"].get<int>();
      if (m.contains("n_state")) fc.model.n_state = m["n_state"].get<int>();
      if (m.contains("block_mode")) fc.model.block_mode = parse_block_mode(m["block_mode"].get<std::string>());
      if (m.contains("fusion_mode")) fc.model.fusion_mode = parse_fusion_mode(m["fusion_mode"].get<std::string>());
      if (m.contains("mean_centered_round")) fc.model.mean_centered_round = m["mean_centered_round"].get<bool>();
      if (m.contains("hyperprior_only")) fc.model.hyperprior_only = m["hyperprior_only"].get<bool>();
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      reject_unknown(t, "train",
                     {"lambda", "metric", "steps", "epochs", "batch_size", "crop", "lr", "lr_final",
                      "clip_norm", "dataset_dir", "loss_log", "seed"});
      if (t.contains("lambda")) fc.train.lambda = t["lambda"].get<double>();
      if (t.contains("metric")) fc.train.metric = parse_metric(t["metric"].get<std::string>());
      if (t.contains("steps")) fc.train.steps = t["steps"].get<int>();
      if (t.contains("epochs")) fc.train.epochs = t["epochs"].get<int>();
      if (t.contains("batch_size")) fc.train.batch_size = t["batch_size"].get<int>();
      if (t.contains("crop")) fc.train.crop = t["crop"].get<int>();
      if (t.contains("lr")) fc.train.lr = t["lr"].get<double>();
      if (t.contains("lr_final")) fc.train.lr_final = t["lr_final"].get<double>();
      if (t.contains("clip_norm")) fc.train.clip_norm = t["clip_norm"].get<double>();
      if (t.contains("dataset_dir")) fc.train.dataset_dir = t["dataset_dir"].get<std::string>();
      if (t.contains("loss_log")) fc.train.loss_log = t["loss_log"].get<std::string>();
      if (t.contains("seed")) fc.train.seed = t["seed"].get<uint64_t>();
    }
  } catch (const json::exception& e) {
    bad_config(e.what());
  }
  return fc;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, dataset, out = "model.ck";
  std::optional<double> lambda, lr, lr_final, clip_norm;
  std::optional<std::string> metric, loss_log;
  std::optional<int> steps, epochs, batch_size, crop;
  std::optional<uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  FullConfig fc = load_config(a.config);
  if (!a.dataset.empty()) fc.train.dataset_dir = a.dataset;
  if (a.lambda) fc.train.lambda = *a.lambda;
  if (a.metric) fc.train.metric = parse_metric(*a.metric);
  if (a.steps) fc.train.steps = *a.steps;
  if (a.epochs) fc.train.epochs = *a.epochs;
  if (a.batch_size) fc.train.batch_size = *a.batch_size;
  if (a.crop) fc.train.crop = *a.crop;
  if (a.lr) fc.train.lr = *a.lr;
  if (a.lr_final) fc.train.lr_final = *a.lr_final;
  if (a.clip_norm) fc.train.clip_norm = *a.clip_norm;
  if (a.loss_log) fc.train.loss_log = *a.loss_log;
  if (a.seed) fc.train.seed = *a.seed;

  fc.model.lambda = fc.train.lambda;
  fc.model.metric = fc.train.metric;
  fc.model.validate();
  fc.train.validate();
  if (fc.train.dataset_dir.empty())
    throw std::invalid_argument("train: no dataset (use --dataset or train.dataset_dir)");
  if (!fs::is_directory(fc.train.dataset_dir))
    throw IoError("not a directory: " + fc.train.dataset_dir);
  require_output_dir(a.out);
  if (!fc.train.loss_log.empty()) require_output_dir(fc.train.loss_log);

  Model m = Model::init(fc.model, fc.train.seed);
  const TrainResult r = train(m, fc.train);
  save_checkpoint(a.out, m);
  if (!r.log.empty()) {
    const TrainLogRow& last = r.log.back();
    std::printf("step %d: rate %.4f bpp, distortion %.6g, loss %.6g\n", last.step, last.rate_bpp,
                last.distortion, last.loss);
  }
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

struct CodecArgs {
  std::string checkpoint, in, out;
};

int cmd_encode(const CodecArgs& a) {
  require_file(a.checkpoint);
  require_file(a.in);
  require_output_dir(a.out);
  const Model m = load_checkpoint(a.checkpoint);
  const EncodedImage e = encode_image(load_image(a.in), m);
  detail::write_file(a.out, e.bytes);
  std::printf("%s: %dx%d, %zu bytes, %.4f bpp (estimate %.4f)\n", a.out.c_str(), e.width, e.height,
              e.bytes.size(), e.bpp, e.estimated_bpp);
  return 0;
}

int cmd_decode(const CodecArgs& a) {
  require_file(a.checkpoint);
  require_file(a.in);
  require_output_dir(a.out);
  const Model m = load_checkpoint(a.checkpoint);
  const Tensor xhat = decode_image(detail::read_file(a.in), m);
  save_image(a.out, xhat);
  std::printf("%s: %dx%d\n", a.out.c_str(), static_cast<int>(xhat.dim(2)),
              static_cast<int>(xhat.dim(1)));
  return 0;
}

// ---------------------------------------------------------------------------
// eval: per-image bpp / PSNR / MS-SSIM plus a mean row.  MS-SSIM needs
// 176x176; smaller images get "nan" there and are skipped in the mean.
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, images, csv;
  int jobs = 1;
};

struct EvalRow {
  std::string name;
  size_t bytes = 0;
  double bpp = 0, est = 0, psnr_db = 0, msssim = 0, msssim_db = 0;
  bool has_msssim = false;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.checkpoint);
  require_output_dir(a.csv);
  const std::vector<std::string> files = list_images(a.images);
  const Model m = load_checkpoint(a.checkpoint);

  std::vector<EvalRow> rows(files.size());
  run_parallel(files.size(), a.jobs, [&](size_t i) {
    const Tensor x = load_image(files[i]);
    const EncodedImage e = encode_image(x, m);
    const Tensor xhat = decode_image(e.bytes, m);
    EvalRow& r = rows[i];
    r.name = fs::path(files[i]).filename().string();
    r.bytes = e.bytes.size();
    r.bpp = e.bpp;
    r.est = e.estimated_bpp;
    r.psnr_db = psnr(x, xhat);
    if (std::min(x.dim(1), x.dim(2)) >= 176) {
      r.msssim = ms_ssim_value(x, xhat);
      r.msssim_db = msssim_to_db(r.msssim);
      r.has_msssim = true;
    }
  });

  std::ofstream f(a.csv);
  if (!f) throw IoError("cannot write " + a.csv);
  f << "image,bytes,bpp,estimated_bpp,psnr_db,msssim,msssim_db\n";
  EvalRow mean;
  int n_ms = 0;
  char buf[192];
  for (const EvalRow& r : rows) {
    if (r.has_msssim)
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.4f,%.6f,%.4f", r.bytes, r.bpp, r.est,
                    r.psnr_db, r.msssim, r.msssim_db);
    else
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.4f,nan,nan", r.bytes, r.bpp, r.est,
                    r.psnr_db);
    f << r.name << ',' << buf << '\n';
    mean.bytes += r.bytes;
    mean.bpp += r.bpp;
    mean.est += r.est;
    mean.psnr_db += r.psnr_db;
    if (r.has_msssim) {
      mean.msssim += r.msssim;
      mean.msssim_db += r.msssim_db;
      ++n_ms;
    }
  }
  const double n = static_cast<double>(rows.size());
  std::snprintf(buf, sizeof buf, "mean,%.1f,%.6f,%.6f,%.4f", static_cast<double>(mean.bytes) / n,
                mean.bpp / n, mean.est / n, mean.psnr_db / n);
  f << buf;
  if (n_ms > 0) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.4f", mean.msssim / n_ms, mean.msssim_db / n_ms);
    f << buf << '\n';
  } else {
    f << ",nan,nan\n";
  }
  f.close();
  if (!f) throw IoError("write failed: " + a.csv);

  std::printf("%zu images: mean %.4f bpp, %.2f dB PSNR", rows.size(), mean.bpp / n,
              mean.psnr_db / n);
  if (n_ms > 0) std::printf(", %.4f MS-SSIM", mean.msssim / n_ms);
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------------------
// probe: spectrum (per-stage delta log-amplitude of the analysis transform)
// or correlation (offset NCC of coder-normalized latents, mean over images).
// ---------------------------------------------------------------------------

struct ProbeArgs {
  std::string checkpoint, images, mode, out, png;
  int offsets = 4, jobs = 1;
};

Tensor heatmap_image(const Tensor& map, int scale) {
  const int n = map.dim(0);
  const int side = n * scale;
  Tensor img({3, side, side});
  const int64_t plane = static_cast<int64_t>(side) * side;
  for (int yy = 0; yy < side; ++yy)
    for (int xx = 0; xx < side; ++xx) {
      const double r = map[static_cast<int64_t>(yy / scale) * n + xx / scale];
      // diverging palette: -1 blue, 0 white, +1 red
      double red = 1.0, green = 1.0, blue = 1.0;
      if (r >= 0.0)
        green = blue = 1.0 - r;
      else
        red = green = 1.0 + r;
      const int64_t px = static_cast<int64_t>(yy) * side + xx;
      img[px] = red;
      img[plane + px] = green;
      img[2 * plane + px] = blue;
    }
  return img;
}

int cmd_probe(const ProbeArgs& a) {
  require_file(a.checkpoint);
  require_output_dir(a.out);
  if (!a.png.empty()) {
    if (a.mode != "correlation")
      throw std::invalid_argument("--png only applies to correlation mode");
    require_output_dir(a.png);
  }
  const std::vector<std::string> files = list_images(a.images);
  const Model m = load_checkpoint(a.checkpoint);

  if (a.mode == "spectrum") {
    std::vector<std::vector<double>> rows(files.size());
    run_parallel(files.size(), a.jobs, [&](size_t i) {
      NoGradGuard ng;
      std::vector<Var> taps;
      analysis_transform(constant(pad_to_multiple(load_image(files[i]), 64)), m.ae.ga, m.cfg,
                         &taps);
      for (const Var& t : taps) rows[i].push_back(spectrum_delta(t->value));
    });

    std::ofstream f(a.out);
    if (!f) throw IoError("cannot write " + a.out);
    f << "image";
    for (size_t s = 0; s < rows[0].size(); ++s) f << ",stage" << s + 1;
    f << '\n';
    std::vector<double> mean(rows[0].size(), 0.0);
    for (size_t i = 0; i < rows.size(); ++i) {
      f << fs::path(files[i]).filename().string();
      for (size_t s = 0; s < rows[i].size(); ++s) {
        char buf[32];
        std::snprintf(buf, sizeof buf, ",%.6f", rows[i][s]);
        f << buf;
        mean[s] += rows[i][s];
      }
      f << '\n';
    }
    f << "mean";
    std::printf("mean delta log-amplitude:");
    for (double& s : mean) {
      s /= static_cast<double>(rows.size());
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.6f", s);
      f << buf;
      std::printf(" %.4f", s);
    }
    f << '\n';
    std::printf("\n");
    f.close();
    if (!f) throw IoError("write failed: " + a.out);
    return 0;
  }

  // correlation
  const int k = a.offsets;
  std::vector<Tensor> maps(files.size());
  run_parallel(files.size(), a.jobs, [&](size_t i) {
    const Tensor x = load_image(files[i]);
    LatentTrace tr;
    encode_image(x, m, &tr);
    std::vector<Var> y, mu, sigma;
    for (size_t g = 0; g < tr.yhat.size(); ++g) {
      y.push_back(constant(tr.yhat[g]));
      mu.push_back(constant(tr.mu[g]));
      sigma.push_back(constant(tr.sigma[g]));
    }
    maps[i] = correlation_map(concat_channels(y)->value, concat_channels(mu)->value,
                              concat_channels(sigma)->value, k);
  });
  Tensor mean(maps[0].shape());
  for (const Tensor& t : maps)
    for (int64_t j = 0; j < t.numel(); ++j) mean[j] += t[j] / static_cast<double>(maps.size());

  std::ofstream f(a.out);
  if (!f) throw IoError("cannot write " + a.out);
  f << "dy,dx,r\n";
  double off_max = 0.0;
  for (int dy = -k; dy <= k; ++dy)
    for (int dx = -k; dx <= k; ++dx) {
      const double r = mean[static_cast<int64_t>(dy + k) * (2 * k + 1) + (dx + k)];
      char buf[48];
      std::snprintf(buf, sizeof buf, "%d,%d,%.6f\n", dy, dx, r);
      f << buf;
      if (dy != 0 || dx != 0) off_max = std::max(off_max, std::fabs(r));
    }
  f.close();
  if (!f) throw IoError("write failed: " + a.out);
  if (!a.png.empty()) save_image(a.png, heatmap_image(mean, 16));
  std::printf("correlation: center %.4f, max off-center %.4f\n",
              mean[static_cast<int64_t>(k) * (2 * k + 1) + k], off_max);
  return 0;
}

// ---------------------------------------------------------------------------
// bdrate: two CSV curves (bpp,quality per row; one optional header line)
// ---------------------------------------------------------------------------

std::vector<RdPoint> read_curve(const std::string& path) {
  require_file(path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<RdPoint> pts;
  std::string line;
  int lineno = 0;
  bool seen_data = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> fields = split(line, ',');
    double bpp = 0, q = 0;
    if (fields.size() < 2 || !parse_double(fields[0], bpp) || !parse_double(fields[1], q)) {
      if (!seen_data) continue;  // header line
      throw FormatError(FormatError::Kind::kBadField,
                        path + ":" + std::to_string(lineno) + ": expected bpp,quality");
    }
    seen_data = true;
    pts.push_back({bpp, q});
  }
  return pts;
}

int cmd_bdrate(const std::string& anchor_csv, const std::string& test_csv) {
  const double v = bd_rate(read_curve(anchor_csv), read_curve(test_csv));
  double shown = std::round(v * 100.0) / 100.0;
  if (shown == 0.0) shown = 0.0;  // normalize -0.00
  std::printf("%.2f%%\n", shown);
  return 0;
}

int fail(int code, const char* what) {
  std::fprintf(stderr, "cmamba: %s\n", what);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CMamba learned image codec", "cmamba"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cmamba 0.1.0");

  TrainArgs ta;
  CLI::App* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--config", ta.config, "JSON config file ({\"model\":{...},\"train\":{...}})");
  t->add_option("--dataset", ta.dataset, "training image directory (overrides config)");
  t->add_option("--out", ta.out, "output checkpoint path")->capture_default_str();
  t->add_option("--seed", ta.seed, "RNG seed for init and data order");
  t->add_option("--lambda", ta.lambda, "rate-distortion tradeoff");
  t->add_option("--metric", ta.metric, "distortion metric")
      ->check(CLI::IsMember({"mse", "msssim"}));
  t->add_option("--steps", ta.steps, "optimizer steps (0: derive from epochs)");
  t->add_option("--epochs", ta.epochs, "dataset passes when steps is 0");
  t->add_option("--batch-size", ta.batch_size, "crops per step");
  t->add_option("--crop", ta.crop, "training crop size (multiple of 64)");
  t->add_option("--lr", ta.lr, "learning rate");
  t->add_option("--lr-final", ta.lr_final, "final learning rate for linear decay");
  t->add_option("--clip-norm", ta.clip_norm, "global gradient-norm clip");
  t->add_option("--loss-log", ta.loss_log, "per-step loss CSV path");

  CodecArgs ea;
  CLI::App* e = app.add_subcommand("encode", "Compress an image");
  e->add_option("--checkpoint", ea.checkpoint, "model checkpoint")->required();
  e->add_option("input", ea.in, "source image (.png/.ppm)")->required();
  e->add_option("output", ea.out, "compressed stream")->required();

  CodecArgs da;
  CLI::App* d = app.add_subcommand("decode", "Decompress a stream");
  d->add_option("--checkpoint", da.checkpoint, "model checkpoint")->required();
  d->add_option("input", da.in, "compressed stream")->required();
  d->add_option("output", da.out, "output image (.png/.ppm)")->required();

  EvalArgs va;
  CLI::App* v = app.add_subcommand("eval", "Rate/distortion report over an image directory");
  v->add_option("--checkpoint", va.checkpoint, "model checkpoint")->required();
  v->add_option("--images", va.images, "image directory")->required();
  v->add_option("--csv", va.csv, "output CSV")->required();
  v->add_option("--jobs", va.jobs, "parallel images")->check(CLI::Range(1, 256));

  ProbeArgs pa;
  CLI::App* p = app.add_subcommand("probe", "Latent diagnostics over an image directory");
  p->add_option("--checkpoint", pa.checkpoint, "model checkpoint")->required();
  p->add_option("--images", pa.images, "image directory")->required();
  p->add_option("--mode", pa.mode, "spectrum or correlation")
      ->required()
      ->check(CLI::IsMember({"spectrum", "correlation"}));
  p->add_option("--out", pa.out, "output CSV")->required();
  p->add_option("--png", pa.png, "correlation heatmap PNG");
  p->add_option("--offsets", pa.offsets, "correlation offset radius")
      ->check(CLI::Range(0, 64));
  p->add_option("--jobs", pa.jobs, "parallel images")->check(CLI::Range(1, 256));

  std::string anchor_csv, test_csv;
  CLI::App* b = app.add_subcommand("bdrate", "BD-Rate between two bpp,quality CSV curves");
  b->add_option("anchor", anchor_csv, "anchor curve CSV")->required();
  b->add_option("test", test_csv, "test curve CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 1;  // help/version exit 0, any parse failure is usage
  }

  try {
    if (t->parsed()) return cmd_train(ta);
    if (e->parsed()) return cmd_encode(ea);
    if (d->parsed()) return cmd_decode(da);
    if (v->parsed()) return cmd_eval(va);
    if (p->parsed()) return cmd_probe(pa);
    if (b->parsed()) return cmd_bdrate(anchor_csv, test_csv);
  } catch (const IoError& ex) {
    return fail(2, ex.what());
  } catch (const FormatError& ex) {
    return fail(3, ex.what());
  } catch (const NumericError& ex) {
    return fail(4, ex.what());
  } catch (const json::exception& ex) {
    return fail(3, ex.what());
  } catch (const std::exception& ex) {
    return fail(1, ex.what());
  }
  return 1;
}
