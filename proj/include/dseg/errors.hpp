#pragma once

#include <stdexcept>
#include <string>

namespace dseg {

// Common base so the CLI boundary can catch the whole family at once.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };  // mismatched tensor shapes
struct GeometryError : Error { using Error::Error; };   // invalid spatial arithmetic
struct RankError : Error { using Error::Error; };       // wrong tensor rank
struct StateError : Error { using Error::Error; };      // lifecycle / API misuse
struct LabelError : Error { using Error::Error; };      // class id out of range
struct ConfigError : Error { using Error::Error; };     // bad configuration value
struct DatasetError : Error { using Error::Error; };    // malformed dataset layout
struct IoError : Error { using Error::Error; };         // file I/O failure

inline void check_dim(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}
inline void check_geom(bool ok, const std::string& msg) {
  if (!ok) throw GeometryError(msg);
}
inline void check_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace dseg
