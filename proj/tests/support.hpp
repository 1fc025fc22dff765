#pragma once

#include <doctest.h>

#include <filesystem>
#include <functional>
#include <string>

#include "demgan/error.hpp"

namespace support {

inline demgan::ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const demgan::Error& e) {
        return e.kind();
    }
    FAIL("expected a demgan::Error");
    return demgan::ErrorKind::io;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
struct ScratchDir {
    std::filesystem::path path;
    explicit ScratchDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("demgan_" + name)) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;
};

}  // namespace support
