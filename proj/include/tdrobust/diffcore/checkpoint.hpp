#pragma once

// Checkpoint container:
//
//   tdrobust-checkpoint 1
//   arch <architecture descriptor>
//   tensor <name> <role> <rank> <d0> ... <dk>
//   ...
//   end
//   <little-endian float64 values of every tensor, in header order>

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "tdrobust/diffcore/params.hpp"

namespace tdr {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string arch;
  ParamSet params;
};

inline const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::weight: return "weight";
    case ParamRole::affine: return "affine";
    case ParamRole::buffer: return "buffer";
  }
  return "weight";
}

inline ParamRole parse_role(const std::string& s) {
  if (s == "weight") return ParamRole::weight;
  if (s == "affine") return ParamRole::affine;
  if (s == "buffer") return ParamRole::buffer;
  throw CheckpointError("unknown parameter role '" + s + "'");
}

inline void write_checkpoint(std::ostream& os, const std::string& arch, const ParamSet& params) {
  if (arch.find('\n') != std::string::npos) throw CheckpointError("architecture descriptor must be one line");
  os << "tdrobust-checkpoint 1\n";
  os << "arch " << arch << '\n';
  for (const auto& e : params.entries()) {
    if (e.name.find_first_of(" \n") != std::string::npos) throw CheckpointError("bad tensor name '" + e.name + "'");
    os << "tensor " << e.name << ' ' << role_name(e.role) << ' ' << e.value.rank();
    for (std::size_t d : e.value.shape()) os << ' ' << d;
    os << '\n';
  }
  os << "end\n";
  for (const auto& e : params.entries())
    os.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  if (!os) throw CheckpointError("failed writing checkpoint stream");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  Checkpoint ck;
  std::string line;
  if (!std::getline(is, line) || line != "tdrobust-checkpoint 1") throw CheckpointError("not a tdrobust checkpoint");
  if (!std::getline(is, line) || line.rfind("arch ", 0) != 0) throw CheckpointError("missing arch line");
  ck.arch = line.substr(5);
  struct Decl {
    std::string name;
    ParamRole role;
    Shape shape;
  };
  std::vector<Decl> decls;
  while (std::getline(is, line) && line != "end") {
    std::istringstream ls(line);
    std::string kw, name, role;
    std::size_t rank = 0;
    if (!(ls >> kw >> name >> role >> rank) || kw != "tensor") throw CheckpointError("bad header line: " + line);
    Shape s(rank);
    for (auto& d : s)
      if (!(ls >> d)) throw CheckpointError("bad shape in header line: " + line);
    decls.push_back({name, parse_role(role), s});
  }
  if (line != "end") throw CheckpointError("header not terminated");
  for (auto& d : decls) {
    std::vector<double> v(shape_size(d.shape));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (is.gcount() != static_cast<std::streamsize>(v.size() * sizeof(double)))
      throw CheckpointError("truncated payload for tensor '" + d.name + "'");
    ck.params.add(d.name, Tensor(d.shape, std::move(v)), d.role);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const std::string& arch, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  write_checkpoint(os, arch, params);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace tdr
