// simsearch: train, export, build, query, bench, eval, scatter, serve.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error. Machine output
// goes to stdout as JSON, diagnostics to stderr.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "simsearch/ingest.hpp"
#include "simsearch/service.hpp"
#include "simsearch/simsearch.hpp"

namespace {

using namespace simsearch;
using Json = nlohmann::json;

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t used = 0;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      } else {
        if (item.find('-') != std::string::npos) throw CLI::ValidationError("list", "negative value '" + item + "'");
        out.push_back(static_cast<T>(std::stoull(item, &used)));
      }
    } catch (const std::logic_error&) {
      throw CLI::ValidationError("list", "bad list item '" + item + "'");
    }
    if (item.find_first_not_of(" \t", used) != std::string::npos) {
      throw CLI::ValidationError("list", "bad list item '" + item + "'");
    }
  }
  return out;
}

struct TrainArgs {
  std::string data, out, log;
  TrainerConfig cfg;
  std::string lr_boundaries, hidden = "64";
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  TrainerConfig cfg = a.cfg;
  cfg.lr_boundaries = parse_list<std::size_t>(a.lr_boundaries);
  cfg.hidden = parse_list<std::size_t>(a.hidden);
  const Dataset ds = load_dataset(a.data);
  const auto result = train(ds, cfg, [&](const TrainLogRow& r) {
    if (!a.quiet) std::cerr << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss " << r.val_loss << "\n";
  });
  save_model(a.out, result.model);
  write_train_log(a.log, result.log);
  Json j = {{"epochs", result.log.size()},
            {"stop_reason", to_string(result.stop_reason)},
            {"best_epoch", result.best_epoch},
            {"best_val_loss", result.best_val_loss},
            {"initial_train_loss", result.log.front().train_loss},
            {"final_train_loss", result.log.back().train_loss},
            {"model", a.out},
            {"log", a.log}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct ExportArgs {
  std::string model, data, out, split = "all";
  std::uint64_t seed = 42;
  double split_fraction = 0.85;
  std::optional<std::uint64_t> ts;
};

int run_export(const ExportArgs& a) {
  const EmbeddingModel model = load_model(a.model);
  const Dataset ds = load_dataset(a.data);
  Dataset chosen = ds;
  std::vector<std::size_t> rows;
  if (a.split != "all") {
    const auto s = split_rows(ds.size(), a.split_fraction, a.seed);
    rows = a.split == "train" ? s.train : s.val;
    chosen = ds.subset(rows);
  }
  auto records = embed_dataset(model, chosen, a.ts.value_or(unix_now()));
  // Keep the dataset ordinal as the id so a split export stays joinable.
  if (!rows.empty()) {
    for (std::size_t i = 0; i < records.size(); ++i) records[i].id = rows[i];
  }
  io::write_file(a.out, emb1::encode(records, static_cast<std::uint32_t>(model.out_dim())));
  std::cout << Json{{"records", records.size()}, {"dim", model.out_dim()}, {"out", a.out}}.dump(2) << "\n";
  return 0;
}

Json stats_json(const IndexStats& st) {
  Json j = {{"count", st.count}, {"dim", st.dim}};
  j["oldest_timestamp"] = st.oldest_timestamp ? Json(*st.oldest_timestamp) : Json(nullptr);
  j["newest_timestamp"] = st.newest_timestamp ? Json(*st.newest_timestamp) : Json(nullptr);
  return j;
}

int run_build(const std::string& emb, const std::string& out, std::size_t subcode_width) {
  const auto records = read_embeddings(emb);
  IndexConfig cfg;
  cfg.subcode_width = subcode_width;
  auto index = Index::build(records, cfg);
  const auto bytes = index->snapshot(out);
  Json j = stats_json(index->stats());
  j["bytes"] = bytes;
  j["out"] = out;
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct QueryArgs {
  std::string index, vec, mode = "exact", metric = "cosine";
  std::optional<std::uint64_t> id;
  std::size_t k = 10, shortlist = 0;
  bool json = false;
};

int run_query(const QueryArgs& a) {
  Index index;
  index.restore(a.index);
  std::vector<float> q;
  std::optional<std::uint64_t> exclude;
  if (a.id) {
    const auto e = index.get(*a.id);
    if (!e) throw Error(ErrorCode::InvalidArgument, "unknown id " + std::to_string(*a.id));
    q = e->embedding;
    exclude = *a.id;
  } else {
    q = parse_list<float>(a.vec);
  }
  const auto hits = search(index, q, a.k, parse_mode(a.mode), parse_metric(a.metric), a.shortlist, exclude);
  if (a.json) {
    Json arr = Json::array();
    for (const auto& h : hits) {
      arr.push_back({{"id", h.id},
                     {"label", h.label ? Json(*h.label) : Json(nullptr)},
                     {"distance", h.distance},
                     {"similarity", h.similarity}});
    }
    std::cout << Json{{"hits", arr}}.dump(2) << "\n";
    return 0;
  }
  std::printf("%-6s %-20s %-8s %-14s %-10s\n", "rank", "id", "label", "distance", "similarity");
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& h = hits[i];
    const std::string label = h.label ? std::to_string(*h.label) : "-";
    std::printf("%-6zu %-20llu %-8s %-14.8f %-10.6f\n", i + 1, static_cast<unsigned long long>(h.id), label.c_str(),
                h.distance, h.similarity);
  }
  return 0;
}

int run_bench(const std::string& index_path, BenchOptions opt, const std::string& mode, const std::string& metric,
              bool samples) {
  Index index;
  index.restore(index_path);
  opt.mode = parse_mode(mode);
  opt.metric = parse_metric(metric);
  std::cout << to_json(latency_bench(index, opt), samples).dump(2) << "\n";
  return 0;
}

int run_eval(const std::string& index_path, const std::string& emb, const std::string& ks, const std::string& mode,
             const std::string& metric, bool text) {
  Index index;
  index.restore(index_path);
  const auto queries = read_embeddings(emb);
  const auto report = recall_precision_at_k(index, queries, parse_list<std::size_t>(ks), parse_metric(metric),
                                            parse_mode(mode));
  if (text) std::cerr << to_text(report);
  std::cout << to_json(report).dump(2) << "\n";
  return 0;
}

int run_scatter(const std::string& emb, const std::string& out) {
  const auto records = read_embeddings(emb);
  const auto n = scatter_export(records, out);
  std::cout << Json{{"points", n}, {"out", out}}.dump(2) << "\n";
  return 0;
}

struct ServeArgs {
  std::string index, ingest;
  ServiceConfig cfg;
  bool lenient = false;
};

int run_serve(ServeArgs a) {
  a.cfg.apply_env();
  if (a.lenient) a.cfg.strict_ingest = false;

  // Block termination signals in every thread; the main thread waits on them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Index index;
  if (!a.index.empty()) index.restore(a.index);
  std::unique_ptr<StreamIngestor> ingestor;
  if (!a.ingest.empty()) {
    ingestor = std::make_unique<StreamIngestor>(index, a.ingest);
    ingestor->start();
  }
  SearchService service(index, a.cfg);
  const int port = service.start();
  std::cerr << "simsearch serving " << index.size() << " items on " << a.cfg.host << ":" << port << "\n";
  std::cout << Json{{"port", port}, {"count", index.size()}}.dump() << std::endl;

  int sig = 0;
  sigwait(&signals, &sig);
  std::cerr << "signal " << sig << ", shutting down\n";
  service.stop();
  if (ingestor) ingestor->stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding similarity search: training, indexing, evaluation and serving"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train an embedding head with semi-hard triplet loss");
  train_cmd->add_option("--data", train_args.data, "CSV path (label,f0,f1,...) or synthetic:classes=..,n=..,dim=..,sep=..,seed=..")
      ->required();
  train_cmd->add_option("--out", train_args.out, "Model checkpoint (.simmodel)")->required();
  train_cmd->add_option("--log", train_args.log, "Per-epoch CSV log")->required();
  train_cmd->add_option("--margin", train_args.cfg.margin, "Triplet margin")->capture_default_str();
  train_cmd->add_option("--lr", train_args.cfg.base_lr, "Base learning rate")->capture_default_str();
  train_cmd->add_option("--lr-boundaries", train_args.lr_boundaries, "Comma-separated epochs where lr drops");
  train_cmd->add_option("--lr-factor", train_args.cfg.lr_factor, "Divisor applied at each boundary")->capture_default_str();
  train_cmd->add_option("--momentum", train_args.cfg.momentum)->capture_default_str();
  train_cmd->add_option("--batch-size", train_args.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--epochs", train_args.cfg.max_epochs, "Maximum epochs")->capture_default_str();
  train_cmd->add_option("--patience", train_args.cfg.patience, "Early-stopping patience")->capture_default_str();
  train_cmd->add_option("--seed", train_args.cfg.seed)->capture_default_str();
  train_cmd->add_option("--split", train_args.cfg.split_fraction, "Train fraction")->capture_default_str();
  train_cmd->add_option("--hidden", train_args.hidden, "Comma-separated hidden layer widths")->capture_default_str();
  train_cmd->add_option("--out-dim", train_args.cfg.out_dim, "Embedding dim")->capture_default_str();
  train_cmd->add_flag("--quiet", train_args.quiet, "No per-epoch progress on stderr");

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export", "Embed a dataset with a trained model into an EMB1 file");
  export_cmd->add_option("--model", export_args.model)->required();
  export_cmd->add_option("--data", export_args.data)->required();
  export_cmd->add_option("--out", export_args.out)->required();
  export_cmd->add_option("--split", export_args.split, "all | train | val")
      ->check(CLI::IsMember({"all", "train", "val"}))
      ->capture_default_str();
  export_cmd->add_option("--seed", export_args.seed, "Split seed (match training)")->capture_default_str();
  export_cmd->add_option("--split-fraction", export_args.split_fraction)->capture_default_str();
  export_cmd->add_option("--ts", export_args.ts, "Timestamp for every record (default: now)");

  std::string build_emb, build_out;
  std::size_t subcode_width = kDefaultSubcodeWidth;
  auto* build_cmd = app.add_subcommand("build", "Build an index snapshot from an embedding file");
  build_cmd->add_option("--emb", build_emb, "EMB1 or JSON-lines embeddings")->required();
  build_cmd->add_option("--out", build_out, "Index snapshot (.simidx)")->required();
  build_cmd->add_option("--subcode-width", subcode_width)->check(CLI::IsMember({8, 16, 32, 64}))->capture_default_str();

  QueryArgs query_args;
  auto* query_cmd = app.add_subcommand("query", "Query an index snapshot");
  query_cmd->add_option("--index", query_args.index)->required();
  auto* vec_opt = query_cmd->add_option("--vec", query_args.vec, "Comma-separated query vector");
  auto* id_opt = query_cmd->add_option("--id", query_args.id, "Query by stored item id (excluded from results)");
  vec_opt->excludes(id_opt);
  query_cmd->add_option("-k", query_args.k)->check(CLI::PositiveNumber)->capture_default_str();
  query_cmd->add_option("--mode", query_args.mode)->check(CLI::IsMember({"exact", "hamming", "two_stage"}))->capture_default_str();
  query_cmd->add_option("--metric", query_args.metric)
      ->check(CLI::IsMember({"cosine", "euclidean", "squared_euclidean"}))
      ->capture_default_str();
  query_cmd->add_option("--shortlist", query_args.shortlist, "Two-stage shortlist size (0 = 10k)");
  query_cmd->add_flag("--json", query_args.json, "Print JSON instead of a table");
  query_cmd->callback([&] {
    if (vec_opt->count() + id_opt->count() != 1) throw CLI::RequiredError("exactly one of --vec / --id");
  });

  std::string bench_index, bench_mode = "exact", bench_metric = "cosine";
  BenchOptions bench_opt;
  bool bench_samples = false;
  auto* bench_cmd = app.add_subcommand("bench", "Measure per-query latency");
  bench_cmd->add_option("--index", bench_index)->required();
  bench_cmd->add_option("--queries", bench_opt.n_queries)->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("-k", bench_opt.k)->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--mode", bench_mode)->check(CLI::IsMember({"exact", "hamming", "two_stage"}))->capture_default_str();
  bench_cmd->add_option("--metric", bench_metric)->capture_default_str();
  bench_cmd->add_option("--warmup", bench_opt.warmup)->capture_default_str();
  bench_cmd->add_option("--seed", bench_opt.seed)->capture_default_str();
  bench_cmd->add_flag("--samples", bench_samples, "Include every latency sample");

  std::string eval_index, eval_emb, eval_k = "1,5,10", eval_mode = "exact", eval_metric = "cosine";
  bool eval_text = false;
  auto* eval_cmd = app.add_subcommand("eval", "Leave-one-out recall/precision@k");
  eval_cmd->add_option("--index", eval_index)->required();
  eval_cmd->add_option("--emb", eval_emb, "Labeled query embeddings")->required();
  eval_cmd->add_option("-k", eval_k, "Comma-separated k values")->capture_default_str();
  eval_cmd->add_option("--mode", eval_mode)->check(CLI::IsMember({"exact", "hamming", "two_stage"}))->capture_default_str();
  eval_cmd->add_option("--metric", eval_metric)->capture_default_str();
  eval_cmd->add_flag("--text", eval_text, "Also print a table on stderr");

  std::string scatter_emb, scatter_out;
  auto* scatter_cmd = app.add_subcommand("scatter", "Export a 2-D PCA scatter CSV (id,label,x,y)");
  scatter_cmd->add_option("--emb", scatter_emb)->required();
  scatter_cmd->add_option("--out", scatter_out)->required();

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API until SIGINT/SIGTERM");
  serve_cmd->add_option("--index", serve_args.index, "Snapshot to load at startup");
  serve_cmd->add_option("--host", serve_args.cfg.host)->capture_default_str();
  serve_cmd->add_option("--port", serve_args.cfg.port, "0 picks a free port; SIMSEARCH_PORT overrides")->capture_default_str();
  serve_cmd->add_option("--snapshot-dir", serve_args.cfg.snapshot_dir);
  serve_cmd->add_option("--feedback-log", serve_args.cfg.feedback_log);
  serve_cmd->add_option("--retention", serve_args.cfg.retention_s, "Seconds kept by periodic eviction")->capture_default_str();
  serve_cmd->add_option("--evict-interval", serve_args.cfg.evict_interval_s, "Seconds between evictions (0 = off)");
  serve_cmd->add_option("--ingest", serve_args.ingest, "Append-only embedding file to tail");
  serve_cmd->add_flag("--lenient", serve_args.lenient, "Skip bad records instead of rejecting the batch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) return run_train(train_args);
    if (*export_cmd) return run_export(export_args);
    if (*build_cmd) return run_build(build_emb, build_out, subcode_width);
    if (*query_cmd) return run_query(query_args);
    if (*bench_cmd) return run_bench(bench_index, bench_opt, bench_mode, bench_metric, bench_samples);
    if (*eval_cmd) return run_eval(eval_index, eval_emb, eval_k, eval_mode, eval_metric, eval_text);
    if (*scatter_cmd) return run_scatter(scatter_emb, scatter_out);
    if (*serve_cmd) return run_serve(serve_args);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
