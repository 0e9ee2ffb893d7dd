#include "tdid/error.hpp"

namespace tdid {

ManifestError::ManifestError(std::vector<std::string> errors)
    : Error([&] {
          std::string msg = "manifest invalid:";
          for (const auto& e : errors) msg += "\n  " + e;
          return msg;
      }()),
      errors_(std::move(errors)) {}

}  // namespace tdid
