#include "smope/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace smope {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'M', 'O', 'P', 'E', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    throw DataError("checkpoint: truncated file");
  }
  return v;
}

void write_matrix(std::ostream& out, const std::string& name, const Matrix& m) {
  write_pod(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod(out, static_cast<std::int64_t>(m.rows()));
  write_pod(out, static_cast<std::int64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
}

std::pair<std::string, Matrix> read_matrix(std::istream& in) {
  const auto name_len = read_pod<std::uint32_t>(in);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  const auto rows = read_pod<std::int64_t>(in);
  const auto cols = read_pod<std::int64_t>(in);
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  if (!in) {
    throw DataError("checkpoint: truncated array block");
  }
  return {std::move(name), std::move(m)};
}

// Stable serialization order over every weight array in the learner.
std::vector<std::pair<std::string, const Matrix*>> array_table(const LearnerState& st) {
  std::vector<std::pair<std::string, const Matrix*>> t;
  for (const DifferentiableParam* p : st.backbone.parameters()) {
    t.emplace_back(p->name, &p->value);
  }
  for (std::size_t l = 0; l < st.prompts.size(); ++l) {
    t.emplace_back(st.prompts[l].keys.name, &st.prompts[l].keys.value);
    t.emplace_back(st.prompts[l].values.name, &st.prompts[l].values.value);
  }
  if (st.head.classes() > 0) {
    t.emplace_back("head.weight", &st.head.weight.value);
    t.emplace_back("head.bias", &st.head.bias.value);
  }
  for (std::size_t l = 0; l < st.prev_prefix_keys.size(); ++l) {
    t.emplace_back("prev_keys." + std::to_string(l), &st.prev_prefix_keys[l]);
  }
  return t;
}

}  // namespace

void save_checkpoint(const LearnerState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("checkpoint: cannot open " + path + " for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);

  const ModelConfig& c = state.cfg;
  for (int v : {c.depth, c.heads, c.embed_dim, c.tokens, c.raw_dim, c.prompt_layers,
                c.prompt_length, c.select_k}) {
    write_pod(out, static_cast<std::int32_t>(v));
  }
  write_pod(out, c.mlp_ratio);
  write_pod(out, static_cast<std::int32_t>(state.tasks_trained));
  write_pod(out, static_cast<std::uint8_t>(state.backbone.frozen ? 1 : 0));
  write_pod(out, static_cast<std::uint32_t>(state.prev_prefix_keys.size()));
  write_pod(out, static_cast<std::uint32_t>(state.head.classes()));

  const auto table = array_table(state);
  write_pod(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, m] : table) {
    write_matrix(out, name, *m);
  }

  for (const PromptBlock& pb : state.prompts) {
    write_pod(out, static_cast<std::uint32_t>(pb.usage.heads));
    write_pod(out, static_cast<std::uint32_t>(pb.usage.experts));
    for (std::uint64_t v : pb.usage.selected_counts) {
      write_pod(out, v);
    }
    for (std::uint64_t v : pb.usage.instance_counts) {
      write_pod(out, v);
    }
  }

  write_pod(out, static_cast<std::uint32_t>(state.class_stats.size()));
  for (const auto& [cls, stats] : state.class_stats) {
    write_pod(out, static_cast<std::int32_t>(cls));
    write_matrix(out, "mean", Matrix(stats.mean.transpose()));
    write_matrix(out, "cov", stats.cov);
  }
  if (!out) {
    throw DataError("checkpoint: write failed for " + path);
  }
}

LearnerState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("checkpoint: cannot open " + path);
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  if (read_pod<std::uint32_t>(in) != kVersion) {
    throw DataError("checkpoint: unsupported version");
  }

  ModelConfig c;
  c.depth = read_pod<std::int32_t>(in);
  c.heads = read_pod<std::int32_t>(in);
  c.embed_dim = read_pod<std::int32_t>(in);
  c.tokens = read_pod<std::int32_t>(in);
  c.raw_dim = read_pod<std::int32_t>(in);
  c.prompt_layers = read_pod<std::int32_t>(in);
  c.prompt_length = read_pod<std::int32_t>(in);
  c.select_k = read_pod<std::int32_t>(in);
  c.mlp_ratio = read_pod<double>(in);

  LearnerState st = make_learner(c, /*seed=*/0);
  st.tasks_trained = read_pod<std::int32_t>(in);
  const bool frozen = read_pod<std::uint8_t>(in) != 0;
  const auto prev_count = read_pod<std::uint32_t>(in);
  const auto head_classes = read_pod<std::uint32_t>(in);
  st.prev_prefix_keys.resize(prev_count);
  if (head_classes > 0) {
    Rng r(0);
    st.head.grow(static_cast<int>(head_classes), c.embed_dim, r);
  }

  std::vector<std::pair<std::string, Matrix*>> slots;
  for (DifferentiableParam* p : st.backbone.parameters()) {
    slots.emplace_back(p->name, &p->value);
  }
  for (std::size_t l = 0; l < st.prompts.size(); ++l) {
    slots.emplace_back(st.prompts[l].keys.name, &st.prompts[l].keys.value);
    slots.emplace_back(st.prompts[l].values.name, &st.prompts[l].values.value);
  }
  if (head_classes > 0) {
    slots.emplace_back("head.weight", &st.head.weight.value);
    slots.emplace_back("head.bias", &st.head.bias.value);
  }
  for (std::size_t l = 0; l < st.prev_prefix_keys.size(); ++l) {
    slots.emplace_back("prev_keys." + std::to_string(l), &st.prev_prefix_keys[l]);
  }

  const auto count = read_pod<std::uint32_t>(in);
  if (count != slots.size()) {
    throw DataError("checkpoint: array count differs from the configured layout");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, m] = read_matrix(in);
    if (name != slots[i].first) {
      throw DataError("checkpoint: unexpected array '" + name + "', wanted '" + slots[i].first +
                      "'");
    }
    *slots[i].second = std::move(m);
  }

  for (PromptBlock& pb : st.prompts) {
    const auto heads = read_pod<std::uint32_t>(in);
    const auto experts = read_pod<std::uint32_t>(in);
    pb.usage = UsageStats(static_cast<int>(heads), static_cast<int>(experts));
    for (auto& v : pb.usage.selected_counts) {
      v = read_pod<std::uint64_t>(in);
    }
    for (auto& v : pb.usage.instance_counts) {
      v = read_pod<std::uint64_t>(in);
    }
  }

  const auto n_stats = read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_stats; ++i) {
    const int cls = read_pod<std::int32_t>(in);
    auto [mname, mean] = read_matrix(in);
    auto [cname, cov] = read_matrix(in);
    GaussianStats gs;
    gs.mean = mean.row(0).transpose();
    gs.cov = std::move(cov);
    st.class_stats.emplace(cls, std::move(gs));
  }
  st.backbone.frozen = false;
  st.backbone.set_frozen(frozen);
  return st;
}

}  // namespace smope
