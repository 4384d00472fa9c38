// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmoe/model/transformer.hpp"

namespace lmoe {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes values as raw little-endian 32-bit floats; returns the byte count.
template <typename T>
std::size_t write_f32_blob(const std::filesystem::path& path, std::span<const T> values);

/// Reads a blob written by write_f32_blob. Throws CheckpointError when the
/// file is missing or its length is not `count` floats.
template <typename T>
std::vector<T> read_f32_blob(const std::filesystem::path& path, std::size_t count);

/// Checkpoint directory layout:
///   manifest.json   format_version, model config, expert count, parameter list
///   params/<n>.bin  one f32 blob per parameter, in manifest order
/// `extra` keys are merged into the manifest (trainer state lives there).
template <typename T>
void save_model(const TransformerLM<T>& model, const std::filesystem::path& dir,
                const nlohmann::json& extra = nlohmann::json::object());

/// Reads and version-checks manifest.json.
nlohmann::json read_manifest(const std::filesystem::path& dir);

/// Rebuilds the model structure from the manifest and restores every
/// parameter's values, trainable flag and origin phase by name.
template <typename T>
TransformerLM<T> load_model(const std::filesystem::path& dir);

}  // namespace lmoe
