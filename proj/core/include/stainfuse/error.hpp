#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace stainfuse {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user input: bad config values, unreadable or malformed files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed on a particular slide.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string slide_id, const std::string& what)
      : Error("stage '" + stage + "' failed" +
              (slide_id.empty() ? std::string() : " on slide '" + slide_id + "'") +
              ": " + what),
        stage_(std::move(stage)),
        slide_id_(std::move(slide_id)) {}

  const std::string& stage() const noexcept { return stage_; }
  const std::string& slide_id() const noexcept { return slide_id_; }

 private:
  std::string stage_;
  std::string slide_id_;
};

}  // namespace stainfuse
