#pragma once

#include <doctest.h>

#include <filesystem>
#include <string>

#include "cir/error.hpp"

#define CHECK_CIR_ERROR(expr, expected_code)                       \
  do {                                                             \
    try {                                                          \
      (void)(expr);                                                \
      FAIL_CHECK("expected " #expected_code);                      \
    } catch (const ::cir::Error& e_) {                             \
      CHECK_MESSAGE(e_.code() == (expected_code), e_.what());      \
    }                                                              \
  } while (0)

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cir_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}
