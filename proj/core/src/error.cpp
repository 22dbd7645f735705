#include "mhl/error.hpp"

namespace mhl {

void throw_config(const std::string& msg) { throw Error(ErrorKind::kConfig, msg); }
void throw_data(const std::string& msg) { throw Error(ErrorKind::kData, msg); }
void throw_numeric(const std::string& msg) { throw Error(ErrorKind::kNumeric, msg); }

}  // namespace mhl
