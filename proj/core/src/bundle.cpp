#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "stcov/pipeline.hpp"

namespace stcov {

namespace {

using nlohmann::json;

// Binary blob of little-endian doubles; the manifest stores offsets into it.
class BlobWriter {
 public:
  std::uint64_t add(const Matrix& m) {
    const std::uint64_t off = static_cast<std::uint64_t>(data_.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) data_.push_back(m(i, j));
    return off;
  }
  std::uint64_t add(const Vector& v) {
    const std::uint64_t off = static_cast<std::uint64_t>(data_.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) data_.push_back(v[i]);
    return off;
  }
  std::uint64_t add(const std::vector<double>& v) {
    const std::uint64_t off = static_cast<std::uint64_t>(data_.size());
    data_.insert(data_.end(), v.begin(), v.end());
    return off;
  }
  const std::vector<double>& data() const { return data_; }

 private:
  std::vector<double> data_;
};

class BlobReader {
 public:
  explicit BlobReader(std::vector<double> data) : data_(std::move(data)) {}
  Matrix matrix(std::uint64_t off, int rows, int cols) const {
    Matrix m(rows, cols);
    std::uint64_t k = off;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = at(k++);
    return m;
  }
  Vector vector(std::uint64_t off, int n) const {
    Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = at(off + i);
    return v;
  }
  std::vector<double> raw(std::uint64_t off, int n) const {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = at(off + i);
    return v;
  }

 private:
  double at(std::uint64_t k) const {
    if (k >= data_.size()) throw FormatError("bundle: blob offset out of range");
    return data_[k];
  }
  std::vector<double> data_;
};

json matrix_ref(BlobWriter& blob, const Matrix& m) {
  return json{{"off", blob.add(m)}, {"rows", m.rows()}, {"cols", m.cols()}};
}

json vector_ref(BlobWriter& blob, const Vector& v) {
  return json{{"off", blob.add(v)}, {"n", v.size()}};
}

Matrix read_matrix(const BlobReader& blob, const json& j) {
  return blob.matrix(j.at("off").get<std::uint64_t>(), j.at("rows").get<int>(),
                     j.at("cols").get<int>());
}

Vector read_vector(const BlobReader& blob, const json& j) {
  return blob.vector(j.at("off").get<std::uint64_t>(), j.at("n").get<int>());
}

json serialize_kron(BlobWriter& blob, const KronCovariance& kc) {
  json j;
  j["t_len"] = kc.dims.t_len;
  j["n_len"] = kc.dims.n_len;
  j["separation_rank"] = kc.separation_rank;
  j["toeplitz_temporal"] = kc.toeplitz_temporal;
  j["psd_epsilon"] = kc.psd_epsilon;
  j["diag_inflated"] = kc.diag_inflated;
  j["rank_clamped"] = kc.rank_clamped;
  j["fit_converged"] = kc.fit_converged;
  json factors = json::array();
  for (const auto& [tf, sf] : kc.factors)
    factors.push_back(json{{"t", matrix_ref(blob, tf)}, {"s", matrix_ref(blob, sf)}});
  j["factors"] = factors;
  if (kc.corrected_diagonal) j["corrected_diagonal"] = vector_ref(blob, *kc.corrected_diagonal);
  return j;
}

KronCovariance deserialize_kron(const BlobReader& blob, const json& j) {
  KronCovariance kc;
  kc.dims = Dims(j.at("t_len").get<int>(), j.at("n_len").get<int>());
  kc.separation_rank = j.at("separation_rank").get<int>();
  kc.toeplitz_temporal = j.at("toeplitz_temporal").get<bool>();
  kc.psd_epsilon = j.at("psd_epsilon").get<double>();
  kc.diag_inflated = j.at("diag_inflated").get<bool>();
  kc.rank_clamped = j.at("rank_clamped").get<bool>();
  kc.fit_converged = j.at("fit_converged").get<bool>();
  for (const auto& f : j.at("factors"))
    kc.factors.emplace_back(read_matrix(blob, f.at("t")), read_matrix(blob, f.at("s")));
  if (j.contains("corrected_diagonal"))
    kc.corrected_diagonal = read_vector(blob, j.at("corrected_diagonal"));
  return kc;
}

json serialize_multires(BlobWriter& blob, const MultiresModel& model) {
  json j;
  const TreeTopology& topo = model.topology();
  j["height"] = topo.height;
  j["width"] = topo.width;
  j["frames"] = topo.frames;
  // parent/scale/dim arrays pin the structure; scale lists are rebuilt
  j["parent"] = topo.parent;
  j["scale_of"] = topo.scale_of;
  j["node_dim"] = topo.node_dim;
  j["leaf_pixel"] = topo.leaf_pixel;

  const TreeParams& p = model.tree_params();
  json a = json::array(), q = json::array();
  for (std::size_t i = 0; i < topo.parent.size(); ++i) {
    if (topo.parent[i] < 0) {
      a.push_back(nullptr);
      q.push_back(nullptr);
    } else {
      a.push_back(matrix_ref(blob, p.a[i]));
      q.push_back(matrix_ref(blob, p.q[i]));
    }
  }
  j["a"] = a;
  j["q"] = q;
  j["root_cov"] = matrix_ref(blob, p.root_cov);

  json scs = json::array();
  for (std::size_t m = 0; m < model.sigma_c().size(); ++m) {
    const SparseMatrix& sc = model.sigma_c()[m];
    json entry;
    entry["size"] = sc.rows();
    std::vector<int> rows, cols;
    std::vector<double> vals;
    for (int k = 0; k < sc.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(sc, k); it; ++it) {
        rows.push_back(static_cast<int>(it.row()));
        cols.push_back(static_cast<int>(it.col()));
        vals.push_back(it.value());
      }
    entry["rows"] = rows;
    entry["cols"] = cols;
    entry["vals_off"] = blob.add(vals);
    entry["nnz"] = vals.size();
    scs.push_back(entry);
  }
  j["sigma_c"] = scs;
  return j;
}

std::shared_ptr<MultiresModel> deserialize_multires(const BlobReader& blob, const json& j) {
  TreeTopology topo;
  topo.height = j.at("height").get<int>();
  topo.width = j.at("width").get<int>();
  topo.frames = j.at("frames").get<int>();
  topo.parent = j.at("parent").get<std::vector<int>>();
  topo.scale_of = j.at("scale_of").get<std::vector<int>>();
  topo.node_dim = j.at("node_dim").get<std::vector<int>>();
  topo.leaf_pixel = j.at("leaf_pixel").get<std::vector<int>>();
  topo.n_scales = *std::max_element(topo.scale_of.begin(), topo.scale_of.end());
  topo.scale_nodes.assign(static_cast<std::size_t>(topo.n_scales) + 1, {});
  for (std::size_t i = 0; i < topo.parent.size(); ++i)
    topo.scale_nodes[static_cast<std::size_t>(topo.scale_of[i])].push_back(static_cast<int>(i));
  auto& leaves = topo.scale_nodes[static_cast<std::size_t>(topo.n_scales)];
  std::sort(leaves.begin(), leaves.end(), [&](int a, int b) {
    return topo.leaf_pixel[static_cast<std::size_t>(a)] < topo.leaf_pixel[static_cast<std::size_t>(b)];
  });
  topo.children.assign(topo.parent.size(), {});
  for (std::size_t i = 0; i < topo.parent.size(); ++i)
    if (topo.parent[i] >= 0)
      topo.children[static_cast<std::size_t>(topo.parent[i])].push_back(static_cast<int>(i));

  TreeParams params;
  params.a.resize(topo.parent.size());
  params.q.resize(topo.parent.size());
  const json& a = j.at("a");
  const json& q = j.at("q");
  for (std::size_t i = 0; i < topo.parent.size(); ++i) {
    if (topo.parent[i] < 0) continue;
    params.a[i] = read_matrix(blob, a.at(i));
    params.q[i] = read_matrix(blob, q.at(i));
  }
  params.root_cov = read_matrix(blob, j.at("root_cov"));

  std::vector<SparseMatrix> sigma_c;
  for (const auto& entry : j.at("sigma_c")) {
    const int size = entry.at("size").get<int>();
    SparseMatrix sc(size, size);
    const auto rows = entry.at("rows").get<std::vector<int>>();
    const auto cols = entry.at("cols").get<std::vector<int>>();
    const int nnz = entry.at("nnz").get<int>();
    const auto vals = blob.raw(entry.at("vals_off").get<std::uint64_t>(), nnz);
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(vals.size());
    for (std::size_t k = 0; k < vals.size(); ++k)
      trips.emplace_back(rows[k], cols[k], vals[k]);
    sc.setFromTriplets(trips.begin(), trips.end());
    sigma_c.push_back(std::move(sc));
  }
  return std::make_shared<MultiresModel>(std::move(topo), std::move(params),
                                         std::move(sigma_c));
}

// JSON has no infinity literal; thresholds default to +-inf
json encode_double(double v) {
  if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
  return json(v);
}

double decode_double(const json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw FormatError("bundle: bad numeric literal '" + s + "'");
  }
  return j.get<double>();
}

json serialize_policy(const DecisionPolicy& p) {
  return json{{"low", encode_double(p.low_threshold)},
              {"high", encode_double(p.high_threshold)},
              {"patch_rows", p.patch_rows},
              {"patch_cols", p.patch_cols},
              {"patch_variance_threshold", encode_double(p.patch_variance_threshold)},
              {"degenerate", p.degenerate_calibration}};
}

DecisionPolicy deserialize_policy(const json& j) {
  DecisionPolicy p;
  p.low_threshold = decode_double(j.at("low"));
  p.high_threshold = decode_double(j.at("high"));
  p.patch_rows = j.at("patch_rows").get<int>();
  p.patch_cols = j.at("patch_cols").get<int>();
  p.patch_variance_threshold = decode_double(j.at("patch_variance_threshold"));
  p.degenerate_calibration = j.at("degenerate").get<bool>();
  return p;
}

void put_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64le(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw FormatError("bundle: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_bundle(const ModelBundle& bundle, const std::string& path) {
  BlobWriter blob;
  json j;
  j["format_version"] = ModelBundle::kVersion;
  j["config"] = bundle.config.to_text();
  j["height"] = bundle.height;
  j["width"] = bundle.width;
  j["frames"] = bundle.frames;
  j["positions"] = bundle.positions;

  json slots = json::array();
  for (const auto& slot : bundle.models) {
    json groups = json::array();
    for (const auto& model : slot) {
      json m;
      m["type"] = model.type;
      m["has_mapping"] = model.has_mapping;
      m["mapping"] = json{{"delta_n", model.mapping.delta_n},
                          {"base_n", model.mapping.base_n},
                          {"t_len", model.mapping.t_len}};
      if (model.type == "multires")
        m["multires"] = serialize_multires(blob, *model.multires);
      else
        m["kron"] = serialize_kron(blob, model.kron);
      groups.push_back(m);
    }
    slots.push_back(groups);
  }
  j["models"] = slots;

  json means = json::array();
  for (const auto& slot : bundle.means) {
    json per_block = json::array();
    for (const auto& mean : slot) per_block.push_back(vector_ref(blob, mean));
    means.push_back(per_block);
  }
  j["means"] = means;

  j["calibration"] = json{{"off", blob.add(bundle.calibration_scores)},
                          {"n", bundle.calibration_scores.size()}};
  json bc = json::array();
  for (const auto& scores : bundle.block_calibration)
    bc.push_back(json{{"off", blob.add(scores)}, {"n", scores.size()}});
  j["block_calibration"] = bc;
  j["policy"] = serialize_policy(bundle.policy);
  json bp = json::array();
  for (const auto& p : bundle.block_policies) bp.push_back(serialize_policy(p));
  j["block_policies"] = bp;

  const std::string manifest = j.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("bundle: cannot write '" + path + "'");
  os.write("STBM", 4);
  os.put(0x01);
  put_u64le(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  put_u64le(os, blob.data().size());
  for (double d : blob.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64le(os, bits);
  }
  if (!os) throw FormatError("bundle: write failed");
}

ModelBundle read_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("bundle: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "STBM", 4) != 0)
    throw FormatError("bundle: bad magic");
  char version = 0;
  if (!is.get(version) || version != 0x01) throw FormatError("bundle: unsupported version");
  const std::uint64_t mlen = get_u64le(is);
  std::string manifest(mlen, '\0');
  if (!is.read(manifest.data(), static_cast<std::streamsize>(mlen)))
    throw FormatError("bundle: truncated manifest");
  const std::uint64_t blen = get_u64le(is);
  std::vector<double> data(blen);
  for (std::uint64_t i = 0; i < blen; ++i) {
    const std::uint64_t bits = get_u64le(is);
    std::memcpy(&data[i], &bits, 8);
  }
  const BlobReader blob(std::move(data));

  json j;
  try {
    j = json::parse(manifest);
  } catch (const std::exception& e) {
    throw FormatError(std::string("bundle: manifest parse error: ") + e.what());
  }
  if (j.at("format_version").get<std::uint32_t>() != ModelBundle::kVersion)
    throw FormatError("bundle: format version mismatch");

  ModelBundle bundle;
  bundle.config = ExperimentConfig::from_text(j.at("config").get<std::string>());
  bundle.height = j.at("height").get<int>();
  bundle.width = j.at("width").get<int>();
  bundle.frames = j.at("frames").get<int>();
  bundle.positions = j.at("positions").get<std::vector<int>>();

  for (const auto& slot : j.at("models")) {
    std::vector<BlockModel> group_models;
    for (const auto& m : slot) {
      BlockModel model;
      model.type = m.at("type").get<std::string>();
      model.has_mapping = m.at("has_mapping").get<bool>();
      const auto& gm = m.at("mapping");
      model.mapping = GridMapping(gm.at("delta_n").get<int>(), gm.at("base_n").get<int>(),
                                  gm.at("t_len").get<int>());
      if (model.type == "multires")
        model.multires = deserialize_multires(blob, m.at("multires"));
      else
        model.kron = deserialize_kron(blob, m.at("kron"));
      group_models.push_back(std::move(model));
    }
    bundle.models.push_back(std::move(group_models));
  }

  for (const auto& slot : j.at("means")) {
    std::vector<Vector> per_block;
    for (const auto& mean : slot) per_block.push_back(read_vector(blob, mean));
    bundle.means.push_back(std::move(per_block));
  }

  bundle.calibration_scores =
      blob.raw(j.at("calibration").at("off").get<std::uint64_t>(),
               j.at("calibration").at("n").get<int>());
  for (const auto& bc : j.at("block_calibration"))
    bundle.block_calibration.push_back(
        blob.raw(bc.at("off").get<std::uint64_t>(), bc.at("n").get<int>()));
  bundle.policy = deserialize_policy(j.at("policy"));
  for (const auto& bp : j.at("block_policies"))
    bundle.block_policies.push_back(deserialize_policy(bp));
  return bundle;
}

}  // namespace stcov
