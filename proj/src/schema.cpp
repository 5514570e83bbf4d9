#include "mdl/schema.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace mdl {
namespace {

using nlohmann::json;

FeatureKind kind_from(const std::string& s) {
  if (s == "categorical") return FeatureKind::Categorical;
  if (s == "dense") return FeatureKind::Dense;
  if (s == "sequence") return FeatureKind::SequenceSummary;
  throw std::invalid_argument("unknown feature kind '" + s + "'");
}

FeatureSource source_from(const std::string& s) {
  if (s == "uid") return FeatureSource::Uid;
  if (s == "qid") return FeatureSource::Qid;
  if (s == "iid") return FeatureSource::Iid;
  if (s == "ctx") return FeatureSource::Ctx;
  if (s == "seq") return FeatureSource::Seq;
  if (s == "member") return FeatureSource::Member;
  throw std::invalid_argument("unknown feature source '" + s + "'");
}

template <typename T>
T required(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw std::invalid_argument(where + ": missing key '" + key + "'");
  return j.at(key).get<T>();
}

std::vector<PriorDef> priors_from(const json& j, const char* key) {
  std::vector<PriorDef> out;
  for (const json& e : required<json>(j, key, "schema")) {
    PriorDef p;
    p.name = required<std::string>(e, "name", key);
    if (!e.contains("prior")) {
      throw std::invalid_argument(std::string(key) + " '" + p.name + "' has no prior feature declaration");
    }
    p.prior = e.at("prior").get<std::vector<std::string>>();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::Categorical: return "categorical";
    case FeatureKind::Dense: return "dense";
    case FeatureKind::SequenceSummary: return "sequence";
  }
  return "?";
}

std::string to_string(FeatureSource source) {
  switch (source) {
    case FeatureSource::Uid: return "uid";
    case FeatureSource::Qid: return "qid";
    case FeatureSource::Iid: return "iid";
    case FeatureSource::Ctx: return "ctx";
    case FeatureSource::Seq: return "seq";
    case FeatureSource::Member: return "member";
  }
  return "?";
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void FeatureSchema::validate() const {
  if (features.empty()) throw std::invalid_argument("schema declares no features");
  if (groups.empty()) throw std::invalid_argument("schema declares no feature groups");
  if (tasks.empty()) throw std::invalid_argument("schema declares no tasks");
  std::set<std::string> names;
  for (const FeatureDef& f : features) {
    if (!names.insert(f.name).second) throw std::invalid_argument("duplicate feature '" + f.name + "'");
    if (f.dim < 1) throw std::invalid_argument("feature '" + f.name + "' needs dim >= 1");
    const bool id_source = f.source == FeatureSource::Uid || f.source == FeatureSource::Qid ||
                           f.source == FeatureSource::Iid;
    if (f.kind == FeatureKind::Categorical) {
      if (f.cardinality < 1) throw std::invalid_argument("feature '" + f.name + "' needs cardinality >= 1");
      if (!id_source) throw std::invalid_argument("categorical feature '" + f.name + "' must read uid/qid/iid");
    } else if (id_source) {
      throw std::invalid_argument("feature '" + f.name + "' reads an id but is not categorical");
    }
    if (f.kind == FeatureKind::SequenceSummary && f.source != FeatureSource::Seq) {
      throw std::invalid_argument("sequence feature '" + f.name + "' must read seq");
    }
    if (f.source == FeatureSource::Member && f.dim != scenarios.size()) {
      throw std::invalid_argument("membership feature '" + f.name + "' must have dim = scenario count");
    }
  }
  std::map<std::string, int> assigned;
  std::set<std::string> group_names;
  for (const GroupDef& g : groups) {
    if (!group_names.insert(g.name).second) throw std::invalid_argument("duplicate group '" + g.name + "'");
    if (g.features.empty()) throw std::invalid_argument("group '" + g.name + "' is empty");
    for (const std::string& f : g.features) {
      if (!names.count(f)) throw std::invalid_argument("group '" + g.name + "' names unknown feature '" + f + "'");
      ++assigned[f];
    }
  }
  for (const FeatureDef& f : features) {
    if (assigned[f.name] != 1) {
      throw std::invalid_argument("feature '" + f.name + "' must belong to exactly one group, found " +
                                  std::to_string(assigned[f.name]));
    }
  }
  for (const auto* list : {&scenarios, &tasks}) {
    for (const PriorDef& p : *list) {
      for (const std::string& f : p.prior) {
        if (!names.count(f)) throw std::invalid_argument("'" + p.name + "' prior names unknown feature '" + f + "'");
      }
    }
  }
}

const FeatureDef& FeatureSchema::feature(const std::string& name) const {
  return features.at(feature_index(name));
}

std::size_t FeatureSchema::feature_index(const std::string& name) const {
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].name == name) return i;
  }
  throw std::out_of_range("unknown feature '" + name + "'");
}

std::size_t FeatureSchema::features_dim(const std::vector<std::string>& names) const {
  std::size_t d = 0;
  for (const std::string& n : names) d += feature(n).dim;
  return d;
}

std::size_t FeatureSchema::group_dim(std::size_t group) const { return features_dim(groups.at(group).features); }

std::vector<std::string> FeatureSchema::important_features() const {
  std::vector<std::string> out;
  for (const FeatureDef& f : features) {
    if (f.important) out.push_back(f.name);
  }
  return out;
}

std::size_t FeatureSchema::important_dim() const { return features_dim(important_features()); }

std::string FeatureSchema::hash() const { return fnv1a_hex(to_json().dump()); }

nlohmann::json FeatureSchema::to_json() const {
  json j;
  j["features"] = json::array();
  for (const FeatureDef& f : features) {
    json e{{"name", f.name}, {"kind", to_string(f.kind)}, {"source", to_string(f.source)}, {"dim", f.dim}};
    if (f.kind == FeatureKind::Categorical) e["cardinality"] = f.cardinality;
    if (f.source == FeatureSource::Ctx) e["offset"] = f.offset;
    if (f.source == FeatureSource::Seq) e["scenario"] = f.scenario;
    if (f.important) e["important"] = true;
    j["features"].push_back(std::move(e));
  }
  j["groups"] = json::array();
  for (const GroupDef& g : groups) j["groups"].push_back({{"name", g.name}, {"features", g.features}});
  for (const char* key : {"scenarios", "tasks"}) {
    const auto& list = std::string(key) == "scenarios" ? scenarios : tasks;
    j[key] = json::array();
    for (const PriorDef& p : list) j[key].push_back({{"name", p.name}, {"prior", p.prior}});
  }
  return j;
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  FeatureSchema s;
  for (const json& e : required<json>(j, "features", "schema")) {
    FeatureDef f;
    f.name = required<std::string>(e, "name", "feature");
    const std::string where = "feature '" + f.name + "'";
    f.kind = kind_from(required<std::string>(e, "kind", where));
    f.source = source_from(required<std::string>(e, "source", where));
    f.dim = required<std::size_t>(e, "dim", where);
    if (f.kind == FeatureKind::Categorical) f.cardinality = required<std::size_t>(e, "cardinality", where);
    f.offset = e.value("offset", std::size_t{0});
    f.scenario = e.value("scenario", std::size_t{0});
    f.important = e.value("important", false);
    s.features.push_back(std::move(f));
  }
  for (const json& e : required<json>(j, "groups", "schema")) {
    GroupDef g;
    g.name = required<std::string>(e, "name", "group");
    g.features = required<std::vector<std::string>>(e, "features", "group '" + g.name + "'");
    s.groups.push_back(std::move(g));
  }
  s.scenarios = priors_from(j, "scenarios");
  s.tasks = priors_from(j, "tasks");
  s.validate();
  return s;
}

FeatureSchema FeatureSchema::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open schema file " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("schema file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace mdl
