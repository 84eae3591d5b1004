#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ri3d {

enum class ErrorCode {
    invalid_argument,
    load,              // dataset ingestion
    behind_camera,
    invalid_depth,
    alignment_failed,
    fusion,            // solver did not converge
    unconstrained,     // Poisson system without any data term
    path_fit,
    oracle_transport,
    oracle_protocol,
    pipeline_order,
    evaluation,
    numerical,         // NaN loss
    checkpoint,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

/// Dataset ingestion failure naming the offending file and field.
class LoadError : public Error {
public:
    LoadError(std::string file, std::string field, const std::string& message)
        : Error(ErrorCode::load, file + ": " + field + ": " + message),
          file_(std::move(file)), field_(std::move(field)) {}
    const std::string& file() const { return file_; }
    const std::string& field() const { return field_; }

private:
    std::string file_;
    std::string field_;
};

class FusionError : public Error {
public:
    FusionError(const std::string& what, double residual, int iterations)
        : Error(ErrorCode::fusion, what), residual_(residual), iterations_(iterations) {}
    double residual() const { return residual_; }
    int iterations() const { return iterations_; }

private:
    double residual_;
    int iterations_;
};

}  // namespace ri3d
