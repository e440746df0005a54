#pragma once

#include <stdexcept>
#include <string>

namespace dsmoe {

// Error classes, kept in sync with the DSMOE_E_* constants of the C API
// (src/capi.cpp static_asserts the mapping).
enum class Status : int {
  ok = 0,
  invalid_argument = 1,   // bad parameter value, unknown enum name
  shape_mismatch = 2,     // tensor/routing dimensions disagree
  invalid_state = 3,      // operation not applicable to this layer/model state
  io_error = 4,           // filesystem failure
  bad_magic = 5,          // container does not start with the expected magic
  truncated = 6,          // file shorter than header/manifest/payload demands
  schema_error = 7,       // manifest present but malformed or inconsistent
  internal = 8,
};

inline const char* status_name(Status s) {
  switch (s) {
    case Status::ok: return "ok";
    case Status::invalid_argument: return "invalid_argument";
    case Status::shape_mismatch: return "shape_mismatch";
    case Status::invalid_state: return "invalid_state";
    case Status::io_error: return "io_error";
    case Status::bad_magic: return "bad_magic";
    case Status::truncated: return "truncated";
    case Status::schema_error: return "schema_error";
    case Status::internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Status code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
  Status code() const { return code_; }

 private:
  Status code_;
};

[[noreturn]] inline void fail(Status code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Status code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace dsmoe
