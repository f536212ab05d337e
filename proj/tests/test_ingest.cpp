// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "flops/ingest.hpp"
#include "support.hpp"

namespace flops {
namespace {

namespace fs = std::filesystem;
using testing::Gen;

class Scratch : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("flops_ingest_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string file(const std::string& name, const std::string& body = {}) {
    const auto p = (dir_ / name).string();
    if (!body.empty()) {
      std::ofstream(p, std::ios::binary) << body;
    }
    return p;
  }

  std::string error_of(const std::function<void()>& f) {
    try {
      f();
    } catch (const FormatError& e) {
      return e.what();
    }
    return "no error";
  }

  fs::path dir_;
};

using Libsvm = Scratch;
using Idx = Scratch;
using Cache = Scratch;

TEST_F(Libsvm, ParsesSingleLine) {
  const auto d = read_libsvm(file("a.svm", "1 3:0.5 7:1.2\n"));
  ASSERT_TRUE(d.data.is_sparse());
  EXPECT_EQ(d.data.rows(), 1);
  EXPECT_EQ(d.data.dim(), 7);
  const auto& X = d.data.sparse();
  EXPECT_EQ(X.nonZeros(), 2);
  EXPECT_DOUBLE_EQ(X.coeff(0, 2), 0.5);
  EXPECT_DOUBLE_EQ(X.coeff(0, 6), 1.2);
  EXPECT_DOUBLE_EQ(d.data.Y(0, 0), 1.0);
}

TEST_F(Libsvm, ZeroBasedAndDeclaredDim) {
  LibsvmOptions o;
  o.zero_based = true;
  o.dim = 10;
  const auto d = read_libsvm(file("a.svm", "-1 0:2 # comment\n\n+1 9:3\n"), o);
  EXPECT_EQ(d.data.rows(), 2);
  EXPECT_EQ(d.data.dim(), 10);
  EXPECT_DOUBLE_EQ(d.data.sparse().coeff(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(d.data.sparse().coeff(1, 9), 3.0);
  EXPECT_DOUBLE_EQ(d.data.Y(0, 0), -1.0);
}

TEST_F(Libsvm, MultiLabelColumns) {
  LibsvmOptions o;
  o.multilabel = true;
  const auto d = read_libsvm(file("m.svm", "3,1 1:1\n7 2:1\n 1:4\n"), o);
  EXPECT_EQ(d.vocabulary, (std::vector<long>{1, 3, 7}));
  Eigen::MatrixXd want(3, 3);
  want << 1, 1, 0, 0, 0, 1, 0, 0, 0;
  EXPECT_EQ(d.data.Y, want);
}

TEST_F(Libsvm, Errors) {
  EXPECT_NE(error_of([&] { read_libsvm(file("e.svm", "# only a comment\n")); }).find("no samples"), std::string::npos);
  EXPECT_NE(error_of([&] { read_libsvm(file("d.svm", "1 2:1 2:3\n")); }).find("duplicate feature index"), std::string::npos);
  LibsvmOptions o;
  o.dim = 5;
  EXPECT_NE(error_of([&] { read_libsvm(file("b.svm", "1 6:1\n"), o); }).find("outside declared dim"), std::string::npos);
  o.zero_based = true;
  EXPECT_NE(error_of([&] { read_libsvm(file("c.svm", "1 5:1\n"), o); }).find("outside declared dim"), std::string::npos);
  EXPECT_NE(error_of([&] { read_libsvm(file("z.svm", "1 0:1\n")); }).find("below 1"), std::string::npos);
  EXPECT_NE(error_of([&] { read_libsvm(file("n.svm", "1 x:1\n")); }).find("bad integer"), std::string::npos);
  EXPECT_NE(error_of([&] { read_libsvm(file("l.svm", "1,2 1:1\n")); }).find("multi-label mode is off"), std::string::npos);
  EXPECT_THROW(read_libsvm((dir_ / "missing.svm").string()), std::runtime_error);
}

TEST_F(Libsvm, RoundTripProperty) {
  Gen gen(1);
  for (int t = 0; t < 20; ++t) {
    const auto n = gen.integer(1, 30), p = gen.integer(1, 40);
    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < p; ++j)
        if (gen.uniform(0, 1) < 0.3) trips.emplace_back(static_cast<int>(i), static_cast<int>(j), gen.normal());
    SparseRows X(n, p);
    X.setFromTriplets(trips.begin(), trips.end());
    Dataset d;
    d.X = X;
    d.Y = gen.gaussian(n);
    const bool zero = t % 2 == 0;
    const auto path = file("rt" + std::to_string(t) + ".svm");
    write_libsvm(path, d, {}, zero);
    LibsvmOptions o;
    o.zero_based = zero;
    o.dim = p;
    const auto back = read_libsvm(path, o);
    EXPECT_LT((Eigen::MatrixXd(back.data.sparse()) - Eigen::MatrixXd(X)).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LT((back.data.Y - d.Y).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST_F(Idx, ScalesPixels) {
  const std::vector<unsigned char> px{0, 255, 51, 102, 0, 0, 0, 255};
  write_idx(file("img"), file("lab"), px, {3, 9}, 2, 2);
  const Dataset d = read_idx(file("img"), file("lab"));
  EXPECT_EQ(d.rows(), 2);
  EXPECT_EQ(d.dim(), 4);
  EXPECT_DOUBLE_EQ(d.dense()(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(d.dense()(0, 2), 0.2);
  EXPECT_DOUBLE_EQ(d.dense()(1, 3), 1.0);
  EXPECT_DOUBLE_EQ(d.Y(1, 0), 9.0);
}

TEST_F(Idx, RejectsBadFiles) {
  const std::vector<unsigned char> px(12, 7);
  write_idx(file("img"), file("lab"), px, {1, 2, 3}, 2, 2);
  // drop the last pixel
  fs::resize_file(dir_ / "img", fs::file_size(dir_ / "img") - 1);
  EXPECT_NE(error_of([&] { read_idx(file("img"), file("lab")); }).find("truncated"), std::string::npos);
  EXPECT_NE(error_of([&] { read_idx(file("img"), file("img")); }).find("bad magic"), std::string::npos);
  EXPECT_NE(error_of([&] { read_idx(file("short", "ab"), file("lab")); }).find("truncated"), std::string::npos);
}

TEST(SelectTopLabels, KeepsMostFrequent) {
  LibsvmData in;
  DenseRows X(4, 1);
  X << 1, 2, 3, 4;
  in.data.X = X;
  in.data.Y.resize(4, 3);
  // label 10 appears twice, 20 three times, 30 once
  in.data.Y << 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1;
  in.vocabulary = {10, 20, 30};
  const auto sel = select_top_labels(in, 1);
  EXPECT_EQ(sel.data.vocabulary, (std::vector<long>{20}));
  EXPECT_EQ(sel.dropped_rows, 1u);
  EXPECT_EQ(sel.data.data.rows(), 3);
  EXPECT_DOUBLE_EQ(sel.retained_fraction, 0.5);
  EXPECT_DOUBLE_EQ(sel.data.data.dense()(2, 0), 3.0);

  const auto two = select_top_labels(in, 2);
  EXPECT_EQ(two.data.vocabulary, (std::vector<long>{20, 10}));
  EXPECT_EQ(two.dropped_rows, 1u);
  EXPECT_THROW(select_top_labels(in, 4), std::invalid_argument);
}

TEST_F(Cache, RoundTripSparseAndDense) {
  Gen gen(2);
  LibsvmData sparse;
  {
    std::vector<Eigen::Triplet<double>> trips{{0, 1, 0.5}, {2, 4, -3.0}, {2, 0, 1e-300}};
    SparseRows X(3, 5);
    X.setFromTriplets(trips.begin(), trips.end());
    sparse.data.X = X;
    sparse.data.Y = Eigen::MatrixXd::Identity(3, 2);
    sparse.vocabulary = {4, 8};
  }
  write_cache(file("s.cache"), sparse);
  const auto s = read_cache(file("s.cache"));
  ASSERT_TRUE(s.data.is_sparse());
  EXPECT_EQ(Eigen::MatrixXd(s.data.sparse()), Eigen::MatrixXd(sparse.data.sparse()));
  EXPECT_EQ(s.data.Y, sparse.data.Y);
  EXPECT_EQ(s.vocabulary, sparse.vocabulary);

  LibsvmData dense;
  dense.data = gen.dataset(TaskKind::linear(), 7, 3);
  write_cache(file("d.cache"), dense);
  const auto d = read_cache(file("d.cache"));
  ASSERT_FALSE(d.data.is_sparse());
  EXPECT_EQ(d.data.dense(), dense.data.dense());
  EXPECT_EQ(d.data.Y, dense.data.Y);
}

TEST_F(Cache, RejectsWrongVersionAndMagic) {
  LibsvmData d;
  d.data.X = DenseRows::Ones(2, 2);
  d.data.Y = Eigen::MatrixXd::Zero(2, 1);
  write_cache(file("c"), d);
  {
    std::fstream f(file("c"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const char v2[4] = {2, 0, 0, 0};
    f.write(v2, 4);
  }
  EXPECT_NE(error_of([&] { read_cache(file("c")); }).find("cache version 2 is not supported"), std::string::npos);
  EXPECT_NE(error_of([&] { read_cache(file("x", "not a cache at all")); }).find("not a dataset cache"), std::string::npos);
  write_cache(file("t"), d);
  fs::resize_file(dir_ / "t", fs::file_size(dir_ / "t") - 3);
  EXPECT_NE(error_of([&] { read_cache(file("t")); }).find("truncated"), std::string::npos);
}

}  // namespace
}  // namespace flops
