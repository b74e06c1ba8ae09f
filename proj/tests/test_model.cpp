#include "budgetlab/model.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "budgetlab/errors.hpp"
#include "budgetlab/rng.hpp"
#include "budgetlab/util.hpp"

using namespace budgetlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.context_length = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.embed_dim = 8;
  c.mlp_dim = 16;
  c.seed = 11;
  return c;
}

std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int& t : out) t = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(vocab)));
  return out;
}

}  // namespace

TEST_CASE("init_params: deterministic, finite, identity gains") {
  const ModelConfig c = tiny_config();
  const Parameters a = init_params(c);
  const Parameters b = init_params(c);
  CHECK(a.data == b.data);
  CHECK(a.all_finite());
  for (const TensorInfo& t : tensor_layout(c)) {
    if (t.name.find("gain") == std::string::npos) continue;
    for (std::size_t i = 0; i < t.size; ++i)
      CHECK(a.data[t.offset + i] == 1.0);
  }
  ModelConfig c2 = c;
  c2.seed = 12;
  CHECK(init_params(c2).data != a.data);
}

TEST_CASE("parameter_count matches the closed-form architecture count") {
  ModelConfig c;
  c.vocab_size = 64;
  c.context_length = 128;
  c.num_layers = 2;
  c.num_heads = 4;
  c.embed_dim = 64;
  c.mlp_dim = 256;
  // tok 64*64 + pos 128*64
  // + 2 * (ln1 2*64 + qkvo 4*64*64 + ln2 2*64 + in 256*64+256 + out 64*256+64)
  // + lnf 2*64 + head 64*64
  const std::size_t expected = 4096 + 8192 + 2 * (128 + 16384 + 128 + 16640 + 16448) + 128 + 4096;
  CHECK(parameter_count(c) == expected);
  CHECK(parameter_count(c) == 115968);
  CHECK(init_params(c).data.size() == expected);
}

TEST_CASE("forward: rows are normalized distributions") {
  const Parameters p = init_params(tiny_config());
  Rng rng(5);
  const auto tokens = random_tokens(10, p.config.vocab_size, rng);
  const LogProbTable table = forward(p, tokens);
  REQUIRE(table.rows == 10);
  for (int i = 0; i < table.rows; ++i) {
    double sum = 0.0;
    for (double lp : table.row(i)) sum += std::exp(lp);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("forward: causality over 100 random perturbations") {
  const Parameters p = init_params(tiny_config());
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng.next_below(10));
    auto tokens = random_tokens(n, p.config.vocab_size, rng);
    const int cut = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n - 1)));
    const LogProbTable base = forward(p, tokens);
    auto mutated = tokens;
    for (int i = cut; i < n; ++i)
      mutated[static_cast<std::size_t>(i)] =
          static_cast<int>(rng.next_below(static_cast<std::uint64_t>(p.config.vocab_size)));
    const LogProbTable after = forward(p, mutated);
    for (int i = 0; i < cut; ++i) {
      const auto r0 = base.row(i);
      const auto r1 = after.row(i);
      for (int j = 0; j < base.cols; ++j) CHECK(r0[j] == r1[j]);
    }
  }
}

TEST_CASE("forward: bit-identical on repeat and against incremental feeds") {
  const Parameters p = init_params(tiny_config());
  Rng rng(3);
  const auto tokens = random_tokens(12, p.config.vocab_size, rng);
  const LogProbTable a = forward(p, tokens);
  const LogProbTable b = forward(p, tokens);
  CHECK(a.data == b.data);

  IncrementalDecoder dec(p);
  for (int i = 0; i < 12; ++i) {
    dec.feed(tokens[static_cast<std::size_t>(i)]);
    const auto row = dec.row();
    const auto want = a.row(i);
    for (int j = 0; j < a.cols; ++j) CHECK(row[j] == want[j]);
  }
  // reset() restarts cleanly.
  dec.reset();
  dec.feed(tokens[0]);
  const auto row = dec.row();
  for (int j = 0; j < a.cols; ++j) CHECK(row[j] == a.row(0)[j]);
}

TEST_CASE("forward: context overflow raises") {
  const Parameters p = init_params(tiny_config());
  std::vector<int> tokens(static_cast<std::size_t>(p.config.context_length) + 1, 1);
  CHECK_THROWS_AS(forward(p, tokens), ContextOverflowError);
}

TEST_CASE("sequence_logprob: masking and agreement with forward") {
  const Parameters p = init_params(tiny_config());
  Rng rng(23);
  const auto context = random_tokens(4, p.config.vocab_size, rng);
  const auto continuation = random_tokens(8, p.config.vocab_size, rng);

  SUBCASE("all-false mask sums to zero") {
    std::vector<std::uint8_t> mask(8, 0);
    const auto r = sequence_logprob(p, context, continuation, mask);
    CHECK(r.total == 0.0);
    for (double term : r.per_token) CHECK(term == 0.0);
  }

  SUBCASE("single-token continuation equals its forward row entry") {
    std::vector<int> one{continuation[0]};
    std::vector<std::uint8_t> mask{1};
    const auto r = sequence_logprob(p, context, one, mask);
    const LogProbTable table = forward(p, context);
    CHECK(r.total == table.row(3)[static_cast<std::size_t>(one[0])]);
  }

  SUBCASE("eight tokens equal the sum of forward rows") {
    std::vector<std::uint8_t> mask(8, 1);
    const auto r = sequence_logprob(p, context, continuation, mask);
    std::vector<int> full = context;
    full.insert(full.end(), continuation.begin(), continuation.end());
    const LogProbTable table = forward(p, full);
    double want = 0.0;
    for (int j = 0; j < 8; ++j)
      want += table.row(3 + j)[static_cast<std::size_t>(continuation[static_cast<std::size_t>(j)])];
    CHECK(r.total == doctest::Approx(want).epsilon(1e-12));
    // Flipping one mask bit removes exactly that token's term.
    std::vector<std::uint8_t> flipped = mask;
    flipped[5] = 0;
    const auto r2 = sequence_logprob(p, context, continuation, flipped);
    CHECK(r.total - r2.total == doctest::Approx(r.per_token[5]).epsilon(1e-12));
    CHECK(r2.per_token[5] == 0.0);
  }

  SUBCASE("errors") {
    std::vector<std::uint8_t> mask(8, 1);
    CHECK_THROWS_AS(sequence_logprob(p, {}, continuation, mask),
                    std::invalid_argument);
    std::vector<int> huge(static_cast<std::size_t>(p.config.context_length), 1);
    CHECK_THROWS_AS(sequence_logprob(p, huge, continuation, mask),
                    ContextOverflowError);
  }
}

TEST_CASE("loss_and_gradients: zero weights give zero loss and gradients") {
  const Parameters p = init_params(tiny_config());
  Rng rng(29);
  SequenceBatchItem item;
  item.context = random_tokens(3, p.config.vocab_size, rng);
  item.continuation = random_tokens(5, p.config.vocab_size, rng);
  item.mask.assign(5, 1);
  item.weights.assign(5, 0.0);
  const auto lg = loss_and_gradients(p, std::vector<SequenceBatchItem>{item});
  CHECK(lg.loss == 0.0);
  for (double g : lg.grads) CHECK(g == 0.0);
}

TEST_CASE("loss_and_gradients: single unit-weight sequence equals -logprob") {
  const Parameters p = init_params(tiny_config());
  Rng rng(31);
  SequenceBatchItem item;
  item.context = random_tokens(3, p.config.vocab_size, rng);
  item.continuation = random_tokens(6, p.config.vocab_size, rng);
  item.mask = {1, 0, 1, 1, 0, 1};
  item.weights.assign(6, 1.0);
  const auto lg = loss_and_gradients(p, std::vector<SequenceBatchItem>{item});
  const auto lp = sequence_logprob(p, item.context, item.continuation, item.mask);
  CHECK(lg.loss == doctest::Approx(-lp.total).epsilon(1e-12));
  CHECK_THROWS_AS(loss_and_gradients(p, {}), std::invalid_argument);
}

TEST_CASE("loss_and_gradients: every coordinate matches central differences") {
  const ModelConfig c = tiny_config();  // 904 parameters
  REQUIRE(parameter_count(c) <= 5000);
  Parameters p = init_params(c);
  Rng rng(41);
  std::vector<SequenceBatchItem> batch(2);
  for (auto& item : batch) {
    item.context = random_tokens(3 + static_cast<int>(rng.next_below(3)), c.vocab_size, rng);
    item.continuation = random_tokens(5 + static_cast<int>(rng.next_below(4)), c.vocab_size, rng);
    item.mask.assign(item.continuation.size(), 1);
    item.mask[1] = 0;  // exercise masking in the backward pass
    item.weights.clear();
    for (std::size_t j = 0; j < item.continuation.size(); ++j)
      item.weights.push_back(0.25 + rng.next_double());
  }
  const auto lg = loss_and_gradients(p, batch);

  const double step = 1e-4;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double saved = p.data[i];
    p.data[i] = saved + step;
    const double up = loss_and_gradients(p, batch).loss;
    p.data[i] = saved - step;
    const double down = loss_and_gradients(p, batch).loss;
    p.data[i] = saved;
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(lg.grads[i] - fd);
    const double bound = std::max(1e-8, 1e-4 * std::abs(fd));
    if (err / std::max(1e-300, bound) > worst) worst = err / bound;
    CHECK(err <= bound);
  }
  MESSAGE("worst finite-difference ratio: ", worst);
}

TEST_CASE("sample_next") {
  Rng rng(53);

  SUBCASE("one-hot distribution returns its token at any temperature") {
    std::vector<double> row(8, -1e30);
    row[5] = 0.0;
    for (double temp : {0.1, 1.0, 10.0})
      for (int i = 0; i < 20; ++i) CHECK(sample_next(row, temp, rng) == 5);
  }

  SUBCASE("uniform over 4 tokens: frequencies within 3 sigma") {
    std::vector<double> row(4, std::log(0.25));
    const int n = 100000;
    int counts[4] = {0, 0, 0, 0};
    for (int i = 0; i < n; ++i) ++counts[sample_next(row, 1.0, rng)];
    const double sigma = std::sqrt(0.25 * 0.75 / n);
    for (int k = 0; k < 4; ++k) {
      const double freq = static_cast<double>(counts[k]) / n;
      CHECK(std::abs(freq - 0.25) <= 3.0 * sigma);
    }
  }

  SUBCASE("vanishing temperature is argmax with low-id tie-break") {
    std::vector<double> row{-3.0, -0.5, -2.0, -0.9};
    for (int i = 0; i < 10; ++i) CHECK(sample_next(row, 1e-9, rng) == 1);
    std::vector<double> tied{-1.0, -0.5, -0.5, -3.0};
    for (int i = 0; i < 10; ++i) CHECK(sample_next(tied, 1e-9, rng) == 1);
  }

  SUBCASE("non-positive temperature raises") {
    std::vector<double> row(4, std::log(0.25));
    CHECK_THROWS_AS(sample_next(row, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_next(row, -1.0, rng), std::invalid_argument);
  }

  SUBCASE("fixed rng stream gives a fixed sample sequence") {
    std::vector<double> row(6, std::log(1.0 / 6.0));
    Rng r1(99), r2(99);
    for (int i = 0; i < 50; ++i)
      CHECK(sample_next(row, 0.7, r1) == sample_next(row, 0.7, r2));
  }
}

TEST_CASE("checkpoint: round-trip preserves everything bit-for-bit") {
  ModelConfig c = tiny_config();
  c.seed = 77;
  const Parameters p = init_params(c);
  const std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint(path, p);
  const Parameters q = load_checkpoint(path);
  CHECK(q.config.same_architecture(p.config));
  CHECK(q.config.seed == p.config.seed);
  CHECK(q.data == p.data);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: validation failures") {
  const Parameters p = init_params(tiny_config());
  const std::string path = "test_ckpt_corrupt.bin";
  save_checkpoint(path, p);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  auto write_bytes = [&path](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto with_fixed_checksum = [](std::string b) {
    const std::uint64_t sum = fnv1a64(b.data(), b.size() - 8);
    for (int i = 0; i < 8; ++i)
      b[b.size() - 8 + static_cast<std::size_t>(i)] =
          static_cast<char>((sum >> (8 * i)) & 0xff);
    return b;
  };

  SUBCASE("flipped payload byte fails the checksum") {
    std::string bad = bytes;
    bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x40);
    write_bytes(bad);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SUBCASE("truncation fails") {
    write_bytes(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SUBCASE("bad magic fails even with a fixed checksum") {
    std::string bad = bytes;
    bad[0] = 'X';
    write_bytes(with_fixed_checksum(bad));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SUBCASE("unsupported version fails") {
    std::string bad = bytes;
    bad[8] = 9;
    write_bytes(with_fixed_checksum(bad));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SUBCASE("config/shape mismatch fails") {
    std::string bad = bytes;
    bad[12] = static_cast<char>(bad[12] + 1);  // vocab_size field
    write_bytes(with_fixed_checksum(bad));
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  std::remove(path.c_str());
}

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  c.embed_dim = 9;  // not divisible by heads
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
