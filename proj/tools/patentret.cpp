// patentret: command-line front end (gen, train, embed, eval, search, serve).

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

// Eigen before httplib: <resolv.h> defines a `_res` macro that Eigen uses as
// an identifier.
#include "patentret/eval.hpp"
#include "patentret/retrieval.hpp"
#include "patentret/train.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <pthread.h>

#ifndef PATENTRET_UI_DIR
#define PATENTRET_UI_DIR ""
#endif

using namespace patentret;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Logging to stderr; PRKT_LOG=error|warn|info|debug (default info).

enum class Level { error, warn, info, debug };

Level log_level() {
  static const Level level = [] {
    const char* env = std::getenv("PRKT_LOG");
    const std::string v = env ? env : "info";
    if (v == "error") return Level::error;
    if (v == "warn" || v == "warning") return Level::warn;
    if (v == "debug") return Level::debug;
    return Level::info;
  }();
  return level;
}

template <class... Parts>
void log(Level level, const Parts&... parts) {
  if (level > log_level()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::ostringstream os;
  os << "[" << names[static_cast<int>(level)] << "] ";
  (os << ... << parts);
  os << '\n';
  std::cerr << os.str() << std::flush;
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path);
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  return out;
}

std::string url_encode_path(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~' || c == '/') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

struct RerankFlags {
  bool enabled = false;
  RerankParams params;

  void add_to(CLI::App* cmd, const std::string& rerank_help) {
    cmd->add_flag("--rerank", enabled, rerank_help);
    cmd->add_option("--k1", params.k1, "re-ranking k1")->capture_default_str();
    cmd->add_option("--k2", params.k2, "re-ranking k2")->capture_default_str();
    cmd->add_option("--lambda", params.lambda, "weight of the original distance")->capture_default_str();
  }
};

// Embedding of one drawing, normalized for eval exactly like gallery images.
std::vector<float> embed_query(const DrawingImage& img, const ModelParams<float>& params) {
  return embed_images({img}, params, 1);
}

ModelParams<float> load_model(const std::string& path) {
  require_file(path, "checkpoint");
  auto ck = load_checkpoint(path);
  log(Level::debug, "loaded ", path, " (fingerprint ", file_fingerprint(path), ")");
  return std::move(ck.params);
}

EmbeddingStore load_store_checked(const std::string& path, const ModelParams<float>* params) {
  require_file(path, "embeddings");
  auto store = load_pemb(path);
  if (params && store.dim() != params->config.embed_dim)
    throw UsageError("embeddings have dimension " + std::to_string(store.dim()) + " but the checkpoint produces " +
                     std::to_string(params->config.embed_dim));
  log(Level::debug, "loaded ", store.size(), " embeddings of dimension ", store.dim(), " from ", path);
  return store;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  SyntheticSpec spec;
  std::string out;
};

void cmd_gen(const GenArgs& a) {
  const auto m = generate_synthetic(a.spec, a.out);
  std::cout << "wrote " << m.entries.size() << " images (" << m.patent_ids(Split::train).size() << " train IDs, "
            << m.patent_ids(Split::val).size() << " val IDs) and " << (fs::path(a.out) / "manifest.jsonl").string()
            << '\n';
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::optional<std::string> manifest, out, log_csv, head;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iters, batch_size;
  std::optional<double> lr;
};

void cmd_train(const TrainArgs& a) {
  require_file(a.config, "train config");
  auto c = load_train_config(a.config);
  if (a.manifest) c.manifest_path = *a.manifest;
  if (a.out) c.checkpoint_path = *a.out;
  if (a.log_csv) c.log_path = *a.log_csv;
  if (a.head) c.model.head = head_kind_from_string(*a.head);
  if (a.seed) c.seed = *a.seed;
  if (a.iters) c.max_iters = *a.iters;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.lr) c.lr = *a.lr;
  if (c.manifest_path.empty()) throw UsageError("no manifest: set \"manifest\" in the config or pass --manifest");
  require_file(c.manifest_path, "manifest");
  log(Level::info, "training ", to_string(c.model.head), " for ", c.max_iters, " iterations, batch ", c.batch_size,
      ", seed ", c.seed);
  const auto result = train(c, [](const TrainRecord& r) {
    std::ostringstream os;
    os << "iter " << r.iter << " loss " << fixed(r.loss, 4);
    if (r.val) os << " val mAP " << fixed(100 * r.val->mAP, 1) << " Rank-1 " << fixed(100 * r.val->rank(1), 1);
    log(Level::info, os.str());
  });
  json summary = {{"checkpoint", c.checkpoint_path},
                  {"iterations", result.losses.size()},
                  {"final_loss", result.losses.back()},
                  {"seconds", result.seconds}};
  if (result.final_val) {
    summary["val"] = *result.final_val;
    summary["best_checkpoint"] = c.best_path();
    summary["best_val_mAP"] = result.best_val_map;
    summary["best_iter"] = result.best_iter;
  }
  if (!c.log_path.empty()) summary["log"] = c.log_path;
  std::cout << summary.dump() << '\n';
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
  std::string checkpoint, manifest, split = "val", out;
  std::size_t batch_size = 64;
};

void cmd_embed(const EmbedArgs& a) {
  const auto params = load_model(a.checkpoint);
  require_file(a.manifest, "manifest");
  const auto manifest = load_manifest(a.manifest);
  const auto fp = file_fingerprint(a.checkpoint);
  EmbeddingStore store;
  if (a.split == "all") {
    auto train_s = embed_dataset(params, manifest, Split::train, a.batch_size, fp);
    auto val_s = embed_dataset(params, manifest, Split::val, a.batch_size, fp);
    std::vector<float> v = train_s.vectors();
    v.insert(v.end(), val_s.vectors().begin(), val_s.vectors().end());
    auto labels = train_s.labels(), refs = train_s.refs();
    labels.insert(labels.end(), val_s.labels().begin(), val_s.labels().end());
    refs.insert(refs.end(), val_s.refs().begin(), val_s.refs().end());
    store = EmbeddingStore::from_unit_rows(std::move(v), train_s.dim(), std::move(labels), std::move(refs));
  } else {
    store = embed_dataset(params, manifest, split_from_string(a.split), a.batch_size, fp);
  }
  save_pemb(store, a.out);
  std::cout << "wrote " << store.size() << " x " << store.dim() << " embeddings to " << a.out << '\n';
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string embeddings, checkpoint, manifest, split = "val", json_out, method;
  RerankFlags rerank;
};

void cmd_eval(const EvalArgs& a) {
  EmbeddingStore store;
  if (!a.embeddings.empty()) {
    store = load_store_checked(a.embeddings, nullptr);
  } else {
    if (a.checkpoint.empty() || a.manifest.empty())
      throw UsageError("pass --embeddings, or --checkpoint together with --manifest");
    const auto params = load_model(a.checkpoint);
    require_file(a.manifest, "manifest");
    store = embed_dataset(params, load_manifest(a.manifest), split_from_string(a.split));
  }
  if (a.rerank.enabled) a.rerank.params.validate();
  const auto report = evaluate(store, a.rerank.enabled ? std::optional(a.rerank.params) : std::nullopt);
  json j = report;
  if (a.rerank.enabled) j["rerank"] = {{"k1", a.rerank.params.k1}, {"k2", a.rerank.params.k2}, {"lambda", a.rerank.params.lambda}};
  std::cout << j.dump() << '\n';
  const std::string method = !a.method.empty() ? a.method : a.rerank.enabled ? "model+rerank" : "model";
  std::cout << format_table(report, method);
  if (!a.json_out.empty()) {
    std::ofstream out(a.json_out);
    if (!out) throw std::runtime_error("cannot write " + a.json_out);
    out << j.dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// search

struct SearchArgs {
  std::string checkpoint, embeddings, query, html, images;
  std::size_t k = 10;
  RerankFlags rerank;
};

void write_html_report(const std::string& path, const std::string& query, const RetrievalResult& r,
                       const std::string& image_root) {
  auto src = [&](const std::string& ref) {
    const fs::path p = image_root.empty() ? fs::path(ref) : fs::path(image_root) / ref;
    return html_escape(fs::absolute(p).string());
  };
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>patentret search</title>\n"
      << "<style>body{font-family:sans-serif}figure{display:inline-block;margin:8px;vertical-align:top}"
         "figure img{image-rendering:pixelated;border:1px solid #ccc}</style></head><body>\n"
      << "<h1>Query</h1>\n<figure><img src=\"" << html_escape(fs::absolute(query).string())
      << "\"><figcaption>" << html_escape(query) << "</figcaption></figure>\n"
      << "<h1>Top " << r.hits.size() << (r.reranked ? " (re-ranked)" : "") << "</h1>\n";
  for (std::size_t i = 0; i < r.hits.size(); ++i) {
    const auto& h = r.hits[i];
    out << "<figure><img src=\"" << src(h.ref) << "\"><figcaption>#" << i + 1 << " " << html_escape(h.patent_id)
        << "<br>" << fixed(h.score, 4) << "</figcaption></figure>\n";
  }
  out << "</body></html>\n";
}

void cmd_search(const SearchArgs& a) {
  const auto params = load_model(a.checkpoint);
  const auto store = load_store_checked(a.embeddings, &params);
  require_file(a.query, "query image");
  const auto q = embed_query(load_image(a.query), params);
  std::size_t k = a.k;
  if (k == 0) throw UsageError("--k must be at least 1");
  if (k > store.size()) {
    log(Level::warn, "k = ", k, " exceeds the gallery size ", store.size(), "; clamped to ", store.size());
    k = store.size();
  }
  const auto r = a.rerank.enabled ? search_reranked(store, q, k, a.rerank.params) : search(store, q, k);
  for (std::size_t i = 0; i < r.hits.size(); ++i)
    std::cout << i + 1 << '\t' << r.hits[i].patent_id << '\t' << r.hits[i].ref << '\t' << fixed(r.hits[i].score)
              << '\n';
  if (!a.html.empty()) {
    write_html_report(a.html, a.query, r, a.images);
    log(Level::info, "wrote ", a.html);
  }
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  std::string checkpoint, embeddings, images, host = "127.0.0.1", ui_dir = PATENTRET_UI_DIR;
  int port = 8080;
  std::size_t default_k = 10;
  RerankFlags rerank;
};

struct ServeState {
  ModelParams<float> params;
  EmbeddingStore store;
  fs::path image_root;
  RerankParams rerank;
  bool rerank_default = false;
  std::size_t default_k = 10;
};

struct HttpError : std::runtime_error {
  int status;
  HttpError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "on" || v == "yes"; }

std::size_t parse_k(const json& v) {
  long k = 0;
  if (v.is_number_integer()) k = v.get<long>();
  else if (v.is_string()) {
    try {
      std::size_t used = 0;
      k = std::stol(v.get<std::string>(), &used);
      if (used != v.get<std::string>().size()) throw HttpError(400, "k must be an integer");
    } catch (const std::logic_error&) {
      throw HttpError(400, "k must be an integer");
    }
  } else {
    throw HttpError(400, "k must be an integer");
  }
  if (k < 1) throw HttpError(400, "k must be at least 1");
  return static_cast<std::size_t>(k);
}

json handle_search(const ServeState& st, const httplib::Request& req) {
  std::vector<float> query;
  std::size_t k = st.default_k;
  bool rerank = st.rerank_default;
  RerankParams rp = st.rerank;
  std::optional<std::string> gallery_ref;

  if (req.is_multipart_form_data()) {
    if (req.has_file("k")) k = parse_k(req.get_file_value("k").content);
    if (req.has_file("rerank")) rerank = truthy(req.get_file_value("rerank").content);
    if (req.has_file("gallery_ref")) gallery_ref = req.get_file_value("gallery_ref").content;
    if (!gallery_ref) {
      if (!req.has_file("image")) throw HttpError(400, "multipart request needs an 'image' file");
      const auto& file = req.get_file_value("image").content;
      DrawingImage img;
      try {
        img = decode_image(std::vector<std::uint8_t>(file.begin(), file.end()));
      } catch (const std::exception& e) {
        throw HttpError(400, std::string("cannot decode uploaded image: ") + e.what());
      }
      query = embed_query(img, st.params);
    }
  } else {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      throw HttpError(400, "request body must be JSON or multipart/form-data");
    }
    if (!body.is_object()) throw HttpError(400, "request body must be a JSON object");
    if (!body.contains("gallery_ref") || !body["gallery_ref"].is_string())
      throw HttpError(400, "JSON request needs a string 'gallery_ref'");
    gallery_ref = body["gallery_ref"].get<std::string>();
    if (body.contains("k")) k = parse_k(body["k"]);
    if (body.contains("rerank")) {
      if (!body["rerank"].is_boolean()) throw HttpError(400, "rerank must be a boolean");
      rerank = body["rerank"].get<bool>();
    }
    try {
      if (body.contains("k1")) rp.k1 = body["k1"].get<std::size_t>();
      if (body.contains("k2")) rp.k2 = body["k2"].get<std::size_t>();
      if (body.contains("lambda")) rp.lambda = body["lambda"].get<double>();
    } catch (const json::exception&) {
      throw HttpError(400, "k1, k2 and lambda must be numbers");
    }
  }
  if (gallery_ref) {
    const long row = st.store.find_ref(*gallery_ref);
    if (row < 0) throw HttpError(404, "unknown gallery_ref '" + *gallery_ref + "'");
    const auto r = st.store.row(static_cast<std::size_t>(row));
    query.assign(r.begin(), r.end());
  }
  k = std::min(k, st.store.size());
  RetrievalResult result;
  try {
    result = rerank ? search_reranked(st.store, query, k, rp) : search(st.store, query, k);
  } catch (const RetrievalError& e) {
    throw HttpError(400, e.what());
  }
  json hits = json::array();
  for (std::size_t i = 0; i < result.hits.size(); ++i) {
    const auto& h = result.hits[i];
    hits.push_back({{"rank", i + 1},
                    {"patent_id", h.patent_id},
                    {"image_url", "/api/images/" + url_encode_path(h.ref)},
                    {"image_path", h.ref},
                    {"score", h.score}});
  }
  return {{"hits", hits}, {"rerank_used", rerank}, {"k", k}};
}

std::string content_type_for(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".png") return "image/png";
  if (ext == ".pgm") return "image/x-portable-graymap";
  return "application/octet-stream";
}

const char* kFallbackIndex =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>patentret</title></head><body>"
    "<h1>patentret search service</h1><p>No UI bundle found. API: GET /api/health, POST /api/search, "
    "GET /api/images/&lt;ref&gt;.</p></body></html>";

void cmd_serve(const ServeArgs& a) {
  ServeState st;
  st.params = load_model(a.checkpoint);
  st.store = load_store_checked(a.embeddings, &st.params);
  if (!fs::is_directory(a.images)) throw UsageError("image root is not a directory: " + a.images);
  st.image_root = a.images;
  st.rerank = a.rerank.params;
  st.rerank_default = a.rerank.enabled;
  st.default_k = a.default_k;
  st.rerank.validate();
  if (a.port < 0 || a.port > 65535) throw UsageError("--port must lie in [0, 65535]");

  httplib::Server svr;
  svr.Get("/api/health", [&](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"gallery_size", st.store.size()}});
  });
  svr.Post("/api/search", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      send_json(res, 200, handle_search(st, req));
    } catch (const HttpError& e) {
      log(Level::warn, "search: ", e.what());
      send_json(res, e.status, {{"error", e.what()}});
    }
  });
  svr.Get(R"(/api/images/(.+))", [&](const httplib::Request& req, httplib::Response& res) {
    const std::string ref = req.matches[1];
    if (st.store.find_ref(ref) < 0) return send_json(res, 404, {{"error", "unknown image ref '" + ref + "'"}});
    const fs::path p = st.image_root / ref;
    std::ifstream in(p, std::ios::binary);
    if (!in) return send_json(res, 404, {{"error", "image file missing: " + ref}});
    std::string bytes{std::istreambuf_iterator<char>(in), {}};
    res.set_content(std::move(bytes), content_type_for(p));
  });
  const bool have_ui = !a.ui_dir.empty() && fs::exists(fs::path(a.ui_dir) / "index.html");
  if (have_ui) {
    svr.set_mount_point("/", a.ui_dir);
  } else {
    log(Level::warn, "no UI bundle at '", a.ui_dir, "'; serving a placeholder page at /");
    svr.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kFallbackIndex, "text/html"); });
  }
  svr.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (req.path.rfind("/api/", 0) == 0) send_json(res, res.status, {{"error", "not found: " + req.path}});
  });
  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    log(Level::error, msg);
    send_json(res, 500, {{"error", msg}});
  });
  svr.set_logger([](const httplib::Request& req, const httplib::Response& res) {
    log(Level::debug, req.method, " ", req.path, " -> ", res.status);
  });

  // SO_REUSEADDR only: the library default adds SO_REUSEPORT, which would let a
  // second server share a busy port silently.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
  });

  int port = a.port;
  if (port == 0) {
    port = svr.bind_to_any_port(a.host);
    if (port < 0) throw std::runtime_error("cannot bind any port on " + a.host);
  } else if (!svr.bind_to_port(a.host, port)) {
    throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(port) + " (port busy or unavailable)");
  }

  // SIGINT/SIGTERM stop the server from a dedicated thread.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);
  std::thread stopper([&] {
    int sig = 0;
    sigwait(&stop_signals, &sig);
    log(Level::info, "signal ", sig, ", shutting down");
    svr.stop();
  });

  std::cout << "listening on http://" << a.host << ":" << port << " (gallery " << st.store.size() << " images)"
            << std::endl;
  const bool ok = svr.listen_after_bind();
  if (stopper.joinable()) {
    if (svr.is_running() || !ok) pthread_kill(stopper.native_handle(), SIGTERM);
    stopper.join();
  }
  if (!ok) throw std::runtime_error("server stopped unexpectedly");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patentret: train and query a patent line-drawing retrieval model"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "patentret 0.1.0");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "render a synthetic multi-view drawing corpus");
  g->add_option("--ids", gen.spec.num_ids, "number of patent IDs")->capture_default_str();
  g->add_option("--views", gen.spec.views_per_id, "views per ID")->capture_default_str();
  g->add_option("--seed", gen.spec.seed, "generator seed")->capture_default_str();
  g->add_option("--size", gen.spec.image_size, "image side in pixels")->capture_default_str();
  g->add_option("--stroke", gen.spec.stroke_width, "line width in pixels")->capture_default_str();
  g->add_option("--val-fraction", gen.spec.val_fraction, "share of IDs held out")->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model from a JSON config");
  t->add_option("--config", tr.config, "train config (JSON)")->required();
  t->add_option("--manifest", tr.manifest, "override the manifest path");
  t->add_option("--out", tr.out, "override the checkpoint path");
  t->add_option("--log", tr.log_csv, "CSV log path");
  t->add_option("--head", tr.head, "softmax or arcface");
  t->add_option("--seed", tr.seed, "override the seed");
  t->add_option("--iters", tr.iters, "override max_iters");
  t->add_option("--batch-size", tr.batch_size, "override batch_size");
  t->add_option("--lr", tr.lr, "override the learning rate");

  EmbedArgs em;
  auto* e = app.add_subcommand("embed", "write PEMB embeddings for one split");
  e->add_option("--checkpoint", em.checkpoint, "model checkpoint")->required();
  e->add_option("--manifest", em.manifest, "dataset manifest")->required();
  e->add_option("--split", em.split, "train, val or all")
      ->check(CLI::IsMember({"train", "val", "all"}))
      ->capture_default_str();
  e->add_option("--out", em.out, "output .pemb file")->required();
  e->add_option("--batch-size", em.batch_size, "images per forward pass")->capture_default_str();

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "leave-one-out mAP and Rank-N");
  v->add_option("--embeddings", ev.embeddings, "PEMB file to evaluate");
  v->add_option("--checkpoint", ev.checkpoint, "embed on the fly with this checkpoint");
  v->add_option("--manifest", ev.manifest, "manifest used with --checkpoint");
  v->add_option("--split", ev.split, "split used with --checkpoint")
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();
  v->add_option("--json-out", ev.json_out, "also write the JSON report here");
  v->add_option("--method", ev.method, "row label in the table");
  ev.rerank.add_to(v, "apply k-reciprocal re-ranking");

  SearchArgs se;
  auto* s = app.add_subcommand("search", "rank the gallery against one query drawing");
  s->add_option("--checkpoint", se.checkpoint, "model checkpoint")->required();
  s->add_option("--embeddings", se.embeddings, "gallery PEMB file")->required();
  s->add_option("--query", se.query, "query image (PNG or PGM)")->required();
  s->add_option("--k", se.k, "number of hits")->capture_default_str();
  s->add_option("--html", se.html, "write an HTML gallery report");
  s->add_option("--images", se.images, "root that gallery refs are relative to (for --html)");
  se.rerank.add_to(s, "apply k-reciprocal re-ranking");

  ServeArgs sv;
  auto* srv = app.add_subcommand("serve", "HTTP search API and web UI");
  srv->add_option("--checkpoint", sv.checkpoint, "model checkpoint")->required();
  srv->add_option("--embeddings", sv.embeddings, "gallery PEMB file")->required();
  srv->add_option("--images", sv.images, "root that gallery refs are relative to")->required();
  srv->add_option("--host", sv.host, "bind address")->capture_default_str();
  srv->add_option("--port", sv.port, "port (0 picks a free one)")->capture_default_str();
  srv->add_option("--ui-dir", sv.ui_dir, "static UI directory served at /")->capture_default_str();
  srv->add_option("--k", sv.default_k, "default number of hits")->capture_default_str();
  sv.rerank.add_to(srv, "re-rank by default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    if (*g) cmd_gen(gen);
    else if (*t) cmd_train(tr);
    else if (*e) cmd_embed(em);
    else if (*v) cmd_eval(ev);
    else if (*s) cmd_search(se);
    else if (*srv) cmd_serve(sv);
  } catch (const UsageError& err) {
    std::cerr << "patentret: error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "patentret: error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
