#include "covsev/schedule.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "covsev/errors.hpp"
#include "covsev/volume.hpp"

namespace covsev {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(initial_lr > 0.0)) throw std::invalid_argument("TrainConfig: initial_lr must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("TrainConfig: lr_decay_factor must be > 0");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] < 1 || lr_decay_epochs[i] >= epochs) {
      throw std::invalid_argument("TrainConfig: decay epoch " + std::to_string(lr_decay_epochs[i]) +
                                  " must lie in [1, epochs)");
    }
    if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      throw std::invalid_argument("TrainConfig: decay epochs must be strictly increasing");
    }
  }
}

TrainConfig TrainConfig::reference_2d() { return TrainConfig{}; }

TrainConfig TrainConfig::reference_3d() {
  TrainConfig c;
  c.epochs = 100;
  c.lr_decay_epochs = {40, 75};
  return c;
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw std::out_of_range("lr_at_epoch: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(config.epochs) + ")");
  }
  double lr = config.initial_lr;
  for (int boundary : config.lr_decay_epochs) {
    if (boundary <= epoch) lr *= config.lr_decay_factor;
  }
  return lr;
}

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "epoch,lr,train_loss,train_f1,val_f1\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_loss) << ','
        << format_double(e.train_f1) << ',' << format_double(e.val_f1) << '\n';
  }
  write_file_atomic(path, out.str());
}

TrainHistory read_history_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "epoch,lr,train_loss,train_f1,val_f1") throw ParseError("history " + path.string() + ": bad header", 1);
  TrainHistory h;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    // from_chars, unlike stream extraction, reads back the "nan" written for
    // runs without a validation split.
    std::vector<std::string_view> fields;
    std::string_view rest = line;
    for (std::size_t cut; (cut = rest.find(',')) != std::string_view::npos; rest.remove_prefix(cut + 1))
      fields.push_back(rest.substr(0, cut));
    fields.push_back(rest);
    auto parse = [&](std::string_view f, auto& out) {
      auto [end, ec] = std::from_chars(f.data(), f.data() + f.size(), out);
      if (ec != std::errc{} || end != f.data() + f.size() || f.empty())
        throw ParseError("history " + path.string() + ": malformed row " + std::to_string(row), row);
    };
    if (fields.size() != 5) throw ParseError("history " + path.string() + ": malformed row " + std::to_string(row), row);
    EpochRecord e;
    parse(fields[0], e.epoch);
    parse(fields[1], e.lr);
    parse(fields[2], e.train_loss);
    parse(fields[3], e.train_f1);
    parse(fields[4], e.val_f1);
    h.epochs.push_back(e);
  }
  return h;
}

}  // namespace covsev
