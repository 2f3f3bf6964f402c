#pragma once

#include "kgmark/kg_model.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace kgmark {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "KGMK files are little-endian; big-endian hosts are not supported");

inline constexpr char kKgmkMagic[4] = {'K', 'G', 'M', 'K'};
inline constexpr std::uint32_t kKgmkVersion = 1;

namespace detail {

template <typename T>
void put(std::string& buf, const T& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.append(p, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos, const std::string& what) {
  if (buf.size() - pos < sizeof(T)) throw ParseError("KGMK: truncated " + what);
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

/// "KGMK", u32 version, then per section: u64 rows, u64 cols, rows*cols f64 row-major.
inline std::string encode_kgmk(const std::vector<Matrix>& sections) {
  std::string buf(kKgmkMagic, 4);
  detail::put(buf, kKgmkVersion);
  for (const Matrix& m : sections) {
    detail::put(buf, static_cast<std::uint64_t>(m.rows()));
    detail::put(buf, static_cast<std::uint64_t>(m.cols()));
    buf.append(reinterpret_cast<const char*>(m.data()),
               static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return buf;
}

inline std::vector<Matrix> decode_kgmk(const std::string& buf) {
  if (buf.size() < 8 || std::memcmp(buf.data(), kKgmkMagic, 4) != 0)
    throw ParseError("KGMK: bad magic");
  std::size_t pos = 4;
  const auto version = detail::take<std::uint32_t>(buf, pos, "version");
  if (version != kKgmkVersion)
    throw ParseError("KGMK: unsupported version " + std::to_string(version));
  std::vector<Matrix> out;
  while (pos < buf.size()) {
    const auto rows = detail::take<std::uint64_t>(buf, pos, "section header");
    const auto cols = detail::take<std::uint64_t>(buf, pos, "section header");
    if (cols != 0 && rows > (buf.size() - pos) / sizeof(double) / cols)
      throw ParseError("KGMK: section larger than file");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const std::size_t bytes = rows * cols * sizeof(double);
    std::memcpy(m.data(), buf.data() + pos, bytes);
    pos += bytes;
    out.push_back(std::move(m));
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void write_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline void save_embedding(const std::string& path, const EmbeddingMatrix& emb) {
  write_file(path, encode_kgmk({emb.entities, emb.relation_phases}));
}

inline EmbeddingMatrix load_embedding(const std::string& path) {
  auto sections = decode_kgmk(read_file(path));
  if (sections.empty() || sections.size() > 2)
    throw ParseError(path + ": expected entity and relation-phase sections");
  EmbeddingMatrix emb;
  emb.entities = std::move(sections[0]);
  emb.relation_phases = sections.size() == 2 ? std::move(sections[1])
                                             : Matrix(0, emb.entities.cols() / 2);
  emb.validate();
  return emb;
}

inline json labels_json(const KnowledgeGraph& kg) {
  return {{"entities", kg.entity_labels()}, {"relations", kg.relation_labels()}};
}

/// Re-indexes a parsed graph onto a fixed label universe, so entities that lost all their
/// triples keep their rows.
inline KnowledgeGraph with_label_universe(const KnowledgeGraph& kg, const json& labels) {
  std::vector<std::string> ents, rels;
  try {
    ents = labels.at("entities").get<std::vector<std::string>>();
    rels = labels.at("relations").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("labels sidecar: ") + e.what());
  }
  std::unordered_map<std::string, EntityId> eid;
  std::unordered_map<std::string, RelationId> rid;
  for (std::size_t i = 0; i < ents.size(); ++i)
    if (!eid.emplace(ents[i], static_cast<EntityId>(i)).second) throw ParseError("labels sidecar: duplicate entity " + ents[i]);
  for (std::size_t i = 0; i < rels.size(); ++i)
    if (!rid.emplace(rels[i], static_cast<RelationId>(i)).second) throw ParseError("labels sidecar: duplicate relation " + rels[i]);
  auto lookup = [](const auto& ids, const std::string& label, const char* what) {
    const auto it = ids.find(label);
    if (it == ids.end()) throw ParseError(std::string("label not in sidecar ") + what + ": " + label);
    return it->second;
  };
  std::vector<Triple> triples;
  triples.reserve(kg.n_triples());
  for (const Triple& t : kg.triples())
    triples.push_back({lookup(eid, kg.entity_labels()[t.head], "entities"),
                       lookup(rid, kg.relation_labels()[t.relation], "relations"),
                       lookup(eid, kg.entity_labels()[t.tail], "entities")});
  const std::size_t ne = ents.size(), nr = rels.size();
  return KnowledgeGraph(ne, nr, std::move(triples), std::move(ents), std::move(rels));
}

}  // namespace kgmark
