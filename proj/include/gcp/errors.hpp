#pragma once

#include <stdexcept>
#include <string>

namespace gcp {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define GCP_DEFINE_ERROR(NAME)                                                 \
    struct NAME : Error {                                                      \
        explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {}     \
    }

// graph construction
GCP_DEFINE_ERROR(CycleDetected);
GCP_DEFINE_ERROR(MultipleRoots);
GCP_DEFINE_ERROR(MultipleOutputs);
GCP_DEFINE_ERROR(UnreachableNode);
GCP_DEFINE_ERROR(DuplicateId);
GCP_DEFINE_ERROR(InvalidCardinality);

// model
GCP_DEFINE_ERROR(DimensionMismatch);
GCP_DEFINE_ERROR(MissingAnnotation);
GCP_DEFINE_ERROR(EmptyDataset);
GCP_DEFINE_ERROR(RootNodeHasNoDistribution);

// acquisition
GCP_DEFINE_ERROR(InvalidDistribution);
GCP_DEFINE_ERROR(PoolTooSmall);
GCP_DEFINE_ERROR(LengthMismatch);
GCP_DEFINE_ERROR(NodeSetMismatch);
GCP_DEFINE_ERROR(BudgetExceedsPool);

// counterfactual
GCP_DEFINE_ERROR(MissingTruth);
GCP_DEFINE_ERROR(InvalidNode);

// oracle and data
GCP_DEFINE_ERROR(OracleUnavailable);
GCP_DEFINE_ERROR(MalformedOracleOutput);
GCP_DEFINE_ERROR(InvalidTable);
GCP_DEFINE_ERROR(UnknownSample);
GCP_DEFINE_ERROR(Timeout);
GCP_DEFINE_ERROR(MalformedResponse);
GCP_DEFINE_ERROR(BudgetExhausted);
GCP_DEFINE_ERROR(ParseError);
GCP_DEFINE_ERROR(MixedDimensions);

// pipeline
GCP_DEFINE_ERROR(IoError);
GCP_DEFINE_ERROR(VersionMismatch);
GCP_DEFINE_ERROR(EmptyTestSet);

#undef GCP_DEFINE_ERROR

} // namespace gcp
